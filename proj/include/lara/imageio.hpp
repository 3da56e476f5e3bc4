#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lara {

// Row-major interleaved image, values in [0, 1] for color data.
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<double> data;

    double at(int y, int x, int c) const {
        return data[static_cast<size_t>((y * width + x) * channels + c)];
    }
    double& at(int y, int x, int c) {
        return data[static_cast<size_t>((y * width + x) * channels + c)];
    }
};

// 8-bit PNG, RGB or grayscale.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// PFM: 32-bit float little-endian, "Pf" (1 channel) or "PF" (3 channels),
// rows stored bottom-up with scale -1.
void write_pfm(const std::string& path, const Image& img);
Image read_pfm(const std::string& path);

}  // namespace lara
