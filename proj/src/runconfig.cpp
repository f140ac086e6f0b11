#include "fmnet/runconfig.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace fmnet {

const std::map<std::string, std::string>& RunConfig::defaults() {
    static const std::map<std::string, std::string> d = {
        // model
        {"variant", "facemagnet"},
        {"input_channels", "3"},
        {"channels", "8,16,32,64,64"},
        {"convs_per_block", "2"},
        {"rpn_channels", "64"},
        {"magnifier_channels", "32"},
        {"skip_reduce_channels", "32"},
        {"fc_dim", "64"},
        {"roi_out", "7"},
        {"context_factor", "2.0"},
        {"context_merge", "0"},
        {"use_context", "1"},
        {"size_split_threshold", "50"},
        {"anchor_scales", "auto"},
        {"anchor_scale_count", "5"},
        {"loss_alpha", "1"},
        {"loss_beta", "1"},
        {"loss_gamma", "1"},
        // training
        {"iters", "3800"},
        {"lr", "0.001"},
        {"lr_drop_iter", "3000"},
        {"lr_after", "0.0001"},
        {"momentum", "0.9"},
        {"weight_decay", "0"},
        {"images_per_batch", "1"},
        {"rpn_batch", "256"},
        {"head_batch", "64"},
        {"pos_neg_ratio", "1"},
        {"rpn_nms", "0.7"},
        {"train_proposals", "300"},
        {"seed", "1"},
        // synthetic data
        {"synth_images", "500"},
        {"synth_size", "128"},
        {"synth_objects_min", "1"},
        {"synth_objects_max", "4"},
        {"synth_min_side", "6"},
        {"synth_max_side", "40"},
        {"synth_noise", "0.05"},
        // inference
        {"scales", "1,1.5,2"},
        {"score_thresh", "0.5"},
        {"nms_thresh", "0.3"},
        {"test_proposals", "300"},
        {"min_side", "0"},
        {"max_side", "0"},
        {"topk", "1000"},
    };
    return d;
}

RunConfig::RunConfig() : values_(defaults()) {}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open config file " + path);
    RunConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const size_t a = line.find_first_not_of(" \t\r");
        if (a == std::string::npos) continue;
        const size_t b = line.find_last_not_of(" \t\r");
        line = line.substr(a, b - a + 1);
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        while (!val.empty() && (val.front() == ' ' || val.front() == '\t')) val.erase(0, 1);
        try {
            cfg.set(key, val);
        } catch (const ParamError& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end())
        throw ParamError("unknown configuration key '" + key + "'");
    values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ParamError("unknown configuration key '" + key + "'");
    return it->second;
}

int RunConfig::get_int(const std::string& key) const {
    return static_cast<int>(std::strtol(get(key).c_str(), nullptr, 10));
}
double RunConfig::get_double(const std::string& key) const {
    return std::strtod(get(key).c_str(), nullptr);
}
bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    return v == "1" || v == "true" || v == "yes" || v == "on";
}
uint64_t RunConfig::get_u64(const std::string& key) const {
    return std::strtoull(get(key).c_str(), nullptr, 10);
}
std::vector<double> RunConfig::get_list(const std::string& key) const {
    std::vector<double> out;
    std::istringstream is(get(key));
    std::string tok;
    while (std::getline(is, tok, ','))
        if (!tok.empty()) out.push_back(std::strtod(tok.c_str(), nullptr));
    return out;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig c;
    c.variant = variant_from_name(get("variant"));
    c.input_channels = get_int("input_channels");
    c.channels.clear();
    for (double v : get_list("channels")) c.channels.push_back(static_cast<int>(v));
    c.convs_per_block = get_int("convs_per_block");
    c.rpn_channels = get_int("rpn_channels");
    c.magnifier_channels = get_int("magnifier_channels");
    c.skip_reduce_channels = get_int("skip_reduce_channels");
    c.fc_dim = get_int("fc_dim");
    c.roi_out = get_int("roi_out");
    c.context_factor = get_double("context_factor");
    c.context_merge_1x1 = get_bool("context_merge");
    c.use_context = get_bool("use_context");
    c.size_split_threshold = get_double("size_split_threshold");
    if (get("anchor_scales") != "auto") {
        c.branch_scales.clear();
        std::istringstream is(get("anchor_scales"));
        std::string part;
        while (std::getline(is, part, ';')) {
            std::vector<double> scales;
            std::istringstream ps(part);
            std::string tok;
            while (std::getline(ps, tok, ','))
                if (!tok.empty()) scales.push_back(std::strtod(tok.c_str(), nullptr));
            if (!scales.empty()) c.branch_scales.push_back(scales);
        }
    }
    c.loss_weights.alpha = get_double("loss_alpha");
    c.loss_weights.beta = get_double("loss_beta");
    c.loss_weights.gamma = get_double("loss_gamma");
    return c;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig c;
    c.total_iters = get_int("iters");
    c.lr_initial = get_double("lr");
    c.lr_drop_iter = get_int("lr_drop_iter");
    c.lr_after = get_double("lr_after");
    c.momentum = get_double("momentum");
    c.weight_decay = get_double("weight_decay");
    c.images_per_batch = get_int("images_per_batch");
    c.rpn_batch = get_int("rpn_batch");
    c.head_batch = get_int("head_batch");
    c.pos_neg_ratio = get_double("pos_neg_ratio");
    c.rpn_nms_thresh = get_double("rpn_nms");
    c.train_proposals = get_int("train_proposals");
    c.seed = get_u64("seed");
    return c;
}

SynthConfig RunConfig::synth_config() const {
    SynthConfig c;
    c.image_count = get_int("synth_images");
    c.image_size = get_int("synth_size");
    c.objects_min = get_int("synth_objects_min");
    c.objects_max = get_int("synth_objects_max");
    c.min_side = get_double("synth_min_side");
    c.max_side = get_double("synth_max_side");
    c.noise_std = get_double("synth_noise");
    c.seed = get_u64("seed");
    return c;
}

PyramidSpec RunConfig::pyramid_spec() const {
    PyramidSpec p;
    p.scales = get_list("scales");
    return p;
}

DetectOptions RunConfig::detect_options() const {
    DetectOptions o;
    o.score_thresh = get_double("score_thresh");
    o.nms_thresh = get_double("nms_thresh");
    o.rpn_nms_thresh = get_double("rpn_nms");
    o.proposals = get_int("test_proposals");
    return o;
}

std::string RunConfig::dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << "=" << v << "\n";
    return os.str();
}

} // namespace fmnet
