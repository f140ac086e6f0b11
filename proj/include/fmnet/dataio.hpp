#ifndef FMNET_DATAIO_HPP
#define FMNET_DATAIO_HPP

#include <map>
#include <string>
#include <vector>

#include "fmnet/model.hpp"
#include "fmnet/trainer.hpp"

namespace fmnet {

struct ImageAnnotation {
    std::string path;
    std::vector<Box> boxes;
};

struct AnnotationSet {
    std::vector<ImageAnnotation> records;
    long dropped_boxes = 0;   // non-positive width/height entries
    long skipped_objects = 0; // generator placements that never fit
};

struct SynthConfig {
    int image_count = 500;
    int image_size = 128; // square, multiple of 16
    int objects_min = 1;
    int objects_max = 4;
    double min_side = 6;
    double max_side = 40;
    double noise_std = 0.05;
    uint64_t seed = 1;

    void validate() const;
};

// Writes image_count PPM images of noisy background with high-contrast
// ellipses/rectangles (log-uniform sizes, rejection-sampled non-overlapping
// placement) plus one annotation file. Byte-identical for a given config.
AnnotationSet generate_synthetic_dataset(const SynthConfig& cfg, const std::string& out_dir);

// Blocked text format: path line, count line, then count lines starting
// "x y w h" (extra numeric fields ignored).
AnnotationSet parse_wider_annotations(const std::string& path);
AnnotationSet parse_wider_annotations_text(const std::string& text, const std::string& origin);

// Binary PPM (P6, maxval 255) <-> [3,H,W] tensor scaled to [0,1].
Tensor read_image(const std::string& path);
void write_image(const Tensor& t, const std::string& path);

// Loads every referenced image; relative paths resolve against base_dir.
Dataset load_dataset(const AnnotationSet& ann, const std::string& base_dir);

// Checkpoint: "FMNT", u32 version, length-prefixed key=value config blob,
// u32 tensor count, then per tensor: u16 name length, name, u8 dtype
// (0=f32, 1=f64), u8 rank, u32 dims, raw little-endian elements.
void save_checkpoint(const Model& m, const std::string& path,
                     const std::map<std::string, Tensor>& extra_tensors = {},
                     const std::map<std::string, std::string>& extra_config = {},
                     bool store_f32 = false);

struct Checkpoint {
    Model model;
    std::map<std::string, Tensor> extras;
    std::map<std::string, std::string> extra_config;
};

Checkpoint load_checkpoint(const std::string& path);

std::string annotation_dir(const std::string& ann_path);

} // namespace fmnet

#endif
