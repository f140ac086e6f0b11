#ifndef FMNET_RUNCONFIG_HPP
#define FMNET_RUNCONFIG_HPP

#include <map>
#include <string>
#include <vector>

#include "fmnet/dataio.hpp"
#include "fmnet/inference.hpp"
#include "fmnet/model.hpp"
#include "fmnet/trainer.hpp"

namespace fmnet {

// Flat key=value configuration ("#" comments). Every key has a default;
// unknown keys are rejected. Flag overrides win over file values.
class RunConfig {
public:
    static const std::map<std::string, std::string>& defaults();

    RunConfig(); // defaults only
    static RunConfig from_file(const std::string& path);

    void set(const std::string& key, const std::string& value); // unknown key throws

    const std::string& get(const std::string& key) const;
    int get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    std::vector<double> get_list(const std::string& key) const;

    // anchor_scales=auto leaves branch_scales empty for data-driven filling
    ModelConfig model_config() const;
    TrainConfig train_config() const;
    SynthConfig synth_config() const;
    PyramidSpec pyramid_spec() const;
    DetectOptions detect_options() const;

    std::string dump() const; // all keys, sorted

private:
    std::map<std::string, std::string> values_;
};

} // namespace fmnet

#endif
