#include "lara/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include <png.h>

#include "lara/core.hpp"

namespace lara {

void write_png(const std::string& path, const Image& img) {
    check(img.channels == 1 || img.channels == 3, "write_png: expected 1 or 3 channels");
    check(img.width > 0 && img.height > 0, "write_png: empty image");
    FILE* fp = std::fopen(path.c_str(), "wb");
    check(fp != nullptr, "write_png: cannot open '" + path + "'");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        fail("write_png: libpng error writing '" + path + "'");
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_byte> row(static_cast<size_t>(img.width * img.channels));
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width * img.channels; ++x) {
            const double v = img.data[static_cast<size_t>(y * img.width * img.channels + x)];
            row[static_cast<size_t>(x)] =
                static_cast<png_byte>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    check(fp != nullptr, "read_png: cannot open '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        fail("read_png: libpng error reading '" + path + "'");
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = static_cast<int>(png_get_channels(png, info));
    Image img;
    img.width = w;
    img.height = h;
    img.channels = c;
    img.data.resize(static_cast<size_t>(w) * h * c);
    std::vector<png_byte> row(static_cast<size_t>(w) * static_cast<size_t>(c));
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w * c; ++x)
            img.data[static_cast<size_t>(y * w * c + x)] = row[static_cast<size_t>(x)] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

void write_pfm(const std::string& path, const Image& img) {
    check(img.channels == 1 || img.channels == 3, "write_pfm: expected 1 or 3 channels");
    FILE* fp = std::fopen(path.c_str(), "wb");
    check(fp != nullptr, "write_pfm: cannot open '" + path + "'");
    std::fprintf(fp, "%s\n%d %d\n-1.0\n", img.channels == 3 ? "PF" : "Pf", img.width, img.height);
    std::vector<float> row(static_cast<size_t>(img.width * img.channels));
    for (int y = img.height - 1; y >= 0; --y) {  // bottom-up
        for (int x = 0; x < img.width * img.channels; ++x)
            row[static_cast<size_t>(x)] =
                static_cast<float>(img.data[static_cast<size_t>(y * img.width * img.channels + x)]);
        std::fwrite(row.data(), sizeof(float), row.size(), fp);
    }
    std::fclose(fp);
}

Image read_pfm(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    check(fp != nullptr, "read_pfm: cannot open '" + path + "'");
    char header[3] = {0, 0, 0};
    int w = 0, h = 0;
    double scale = 0;
    if (std::fscanf(fp, "%2s %d %d %lf", header, &w, &h, &scale) != 4 || w <= 0 || h <= 0) {
        std::fclose(fp);
        fail("read_pfm: malformed header in '" + path + "'");
    }
    std::fgetc(fp);  // single whitespace after the scale
    const int c = std::strcmp(header, "PF") == 0 ? 3 : 1;
    check(scale < 0, "read_pfm: big-endian PFM not supported ('" + path + "')");
    Image img;
    img.width = w;
    img.height = h;
    img.channels = c;
    img.data.resize(static_cast<size_t>(w) * h * c);
    std::vector<float> row(static_cast<size_t>(w) * static_cast<size_t>(c));
    for (int y = h - 1; y >= 0; --y) {
        if (std::fread(row.data(), sizeof(float), row.size(), fp) != row.size()) {
            std::fclose(fp);
            fail("read_pfm: truncated data in '" + path + "'");
        }
        for (int x = 0; x < w * c; ++x) img.data[static_cast<size_t>(y * w * c + x)] = row[static_cast<size_t>(x)];
    }
    std::fclose(fp);
    return img;
}

}  // namespace lara
