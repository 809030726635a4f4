#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace bridgeseg {

// Dense row-major 2D raster with `channels` interleaved samples per pixel.
// channels == 3 for RGB images, 1 for class-index label maps.
template <typename T>
struct Raster {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<T> data;

    Raster() = default;
    Raster(int h, int w, int c, T fill = T{})
        : height(h), width(w), channels(c),
          data(static_cast<size_t>(h) * w * c, fill) {
        if (h < 0 || w < 0 || c <= 0) throw std::invalid_argument("bad raster dims");
    }

    bool empty() const { return height == 0 || width == 0; }
    size_t size() const { return data.size(); }

    T& at(int y, int x, int c = 0) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    const T& at(int y, int x, int c = 0) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }

    bool same_shape(const Raster& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    friend bool operator==(const Raster& a, const Raster& b) {
        return a.same_shape(b) && a.data == b.data;
    }
};

using RgbImage = Raster<uint8_t>;   // channels == 3
using LabelMap = Raster<uint8_t>;   // channels == 1, pixel value == class id

// Copies the h x w window at (y0, x0). The window must lie inside src.
template <typename T>
Raster<T> crop(const Raster<T>& src, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || y0 + h > src.height || x0 + w > src.width) {
        throw std::out_of_range("crop window outside raster");
    }
    Raster<T> out(h, w, src.channels);
    for (int y = 0; y < h; ++y) {
        const T* s = &src.data[((static_cast<size_t>(y0) + y) * src.width + x0) * src.channels];
        T* d = &out.data[static_cast<size_t>(y) * w * src.channels];
        std::copy(s, s + static_cast<size_t>(w) * src.channels, d);
    }
    return out;
}

// Writes src into dst at (y0, x0); src must fit.
template <typename T>
void paste(Raster<T>& dst, const Raster<T>& src, int y0, int x0) {
    if (dst.channels != src.channels) throw std::invalid_argument("channel mismatch");
    if (y0 < 0 || x0 < 0 || y0 + src.height > dst.height || x0 + src.width > dst.width) {
        throw std::out_of_range("paste window outside raster");
    }
    for (int y = 0; y < src.height; ++y) {
        const T* s = &src.data[static_cast<size_t>(y) * src.width * src.channels];
        T* d = &dst.data[((static_cast<size_t>(y0) + y) * dst.width + x0) * dst.channels];
        std::copy(s, s + static_cast<size_t>(src.width) * src.channels, d);
    }
}

}  // namespace bridgeseg
