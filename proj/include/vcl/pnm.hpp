#pragma once

#include <string>

#include "vcl/tensor.hpp"

namespace vcl {

// Portable-pixmap family I/O. Reads P2/P3 (ASCII) and P5/P6 (binary) with
// any maxval up to 65535, scaling samples to [0,1]. Returned shape is
// [h,w,1] for graymaps and [h,w,3] for pixmaps.
Tensor read_pnm(const std::string& path);

// Writers emit binary files with maxval 255; values are clamped to [0,1].
void write_pgm(const std::string& path, const Tensor& image); // [h,w] or [h,w,1]
void write_ppm(const std::string& path, const Tensor& image); // [h,w,3]

} // namespace vcl
