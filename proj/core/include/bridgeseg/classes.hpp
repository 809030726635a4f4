#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace bridgeseg {

// Tissue class indices. The mapping is fixed; rasters, probability masks,
// metrics and reports all use this order.
//   0 BG  background
//   1 VT  viable tumor
//   2 NC  necrosis
//   3 FH  fibrosis / hyalination
//   4 HC  hemorrhage / cystic change
//   5 IF  inflammatory
//   6 NT  non-tumor tissue
inline constexpr int kNumClasses = 7;

enum class ClassId : uint8_t { BG = 0, VT = 1, NC = 2, FH = 3, HC = 4, IF = 5, NT = 6 };

inline constexpr std::array<std::string_view, kNumClasses> kClassNames = {
    "BG", "VT", "NC", "FH", "HC", "IF", "NT"};

inline constexpr bool is_valid_class(int c) { return c >= 0 && c < kNumClasses; }

struct Rgb {
    uint8_t r, g, b;
};

// Base rendering palette, one distinct color per class. BG is near-white so
// background tiles trip the tissue filter and padding blends in.
inline constexpr std::array<Rgb, kNumClasses> kBasePalette = {{
    {245, 245, 245},  // BG
    {150, 40, 110},   // VT
    {235, 180, 140},  // NC
    {215, 120, 190},  // FH
    {170, 30, 40},    // HC
    {70, 60, 150},    // IF
    {120, 170, 200},  // NT
}};

}  // namespace bridgeseg
