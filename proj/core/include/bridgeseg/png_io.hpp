#pragma once

#include <filesystem>

#include "bridgeseg/raster.hpp"

namespace bridgeseg {

// 8-bit PNG, RGB (channels == 3) or grayscale (channels == 1). Label maps are
// stored as grayscale with pixel value == class id. Output bytes are a pure
// function of the pixel data: no timestamps or ancillary chunks are written.
void write_png(const std::filesystem::path& path, const Raster<uint8_t>& img);
Raster<uint8_t> read_png(const std::filesystem::path& path);

}  // namespace bridgeseg
