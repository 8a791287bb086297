#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "parbeam/types.hpp"

namespace parbeam::io {

// On-disk format: <stem>.json header + <stem>.raw payload of little-endian
// 32-bit IEEE floats, first index fastest. The path argument is the stem;
// any trailing ".json"/".raw" is stripped.

Volume read_volume(const std::filesystem::path& stem);
void write_volume(const Volume& v, const std::filesystem::path& stem);

ProjectionViews read_views(const std::filesystem::path& stem);
void write_views(const ProjectionViews& v, const std::filesystem::path& stem);

PsfStack<float> read_psf(const std::filesystem::path& stem);
void write_psf(const PsfStack<float>& p, const std::filesystem::path& stem);

/// Label volume (8-bit) plus a JSON legend mapping label names to values.
struct LabelMap {
    Shape3 shape;
    std::vector<std::uint8_t> labels;
    std::map<std::string, std::uint8_t> legend;
};

LabelMap read_labels(const std::filesystem::path& stem);
void write_labels(const LabelMap& m, const std::filesystem::path& stem);

} // namespace parbeam::io
