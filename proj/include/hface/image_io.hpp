#pragma once

#include "hface/common.hpp"

#include <string>

namespace hface {

// Images are H x W x 3 linear RGB in memory. PNG files are 8-bit sRGB
// (converted on the way in/out); PFM files are linear float32 and lossless
// for value ranges beyond [0,1].

Image load_image(const std::string& path);        // dispatches on extension
void save_image(const Image& img, const std::string& path);

Image load_png(const std::string& path);
void save_png(const Image& img, const std::string& path);

Image load_pfm(const std::string& path);
void save_pfm(const Image& img, const std::string& path);

// Single-channel float grid as PFM ("Pf" variant).
Grid load_pfm_gray(const std::string& path);
void save_pfm_gray(const Grid& g, const std::string& path);

}  // namespace hface
