// SPDX-License-Identifier: Apache-2.0
#include "flatl2o/idx.hpp"

#include <fstream>
#include <vector>

namespace flatl2o {

namespace {

std::uint32_t read_u32_be(std::istream& in, const std::string& what) {
  unsigned char buf[4];
  if (!in.read(reinterpret_cast<char*>(buf), 4))
    throw Truncated("truncated IDX file while reading " + what);
  return (static_cast<std::uint32_t>(buf[0]) << 24) |
         (static_cast<std::uint32_t>(buf[1]) << 16) |
         (static_cast<std::uint32_t>(buf[2]) << 8) |
         static_cast<std::uint32_t>(buf[3]);
}

std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Truncated("cannot open IDX file: " + path);
  return in;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 long limit) {
  std::ifstream img = open_or_throw(images_path);
  const std::uint32_t img_magic = read_u32_be(img, "image magic");
  if (img_magic != kIdxImagesMagic) throw BadMagic(kIdxImagesMagic, img_magic);
  const std::uint32_t n_img = read_u32_be(img, "image count");
  const std::uint32_t rows = read_u32_be(img, "image rows");
  const std::uint32_t cols = read_u32_be(img, "image cols");

  std::ifstream lab = open_or_throw(labels_path);
  const std::uint32_t lab_magic = read_u32_be(lab, "label magic");
  if (lab_magic != kIdxLabelsMagic) throw BadMagic(kIdxLabelsMagic, lab_magic);
  const std::uint32_t n_lab = read_u32_be(lab, "label count");

  if (n_img != n_lab) throw CountMismatch(n_img, n_lab);

  const std::uint32_t keep =
      limit < 0 ? n_img : std::min<std::uint32_t>(n_img, static_cast<std::uint32_t>(limit));
  const std::size_t d = static_cast<std::size_t>(rows) * cols;

  Dataset out;
  out.label_kind = LabelKind::Class;
  out.train_x.resize(keep, static_cast<Eigen::Index>(d));
  out.train_y.resize(keep);

  std::vector<unsigned char> pixel_row(d);
  for (std::uint32_t i = 0; i < keep; ++i) {
    if (!img.read(reinterpret_cast<char*>(pixel_row.data()),
                  static_cast<std::streamsize>(d)))
      throw Truncated("truncated IDX image data at example " + std::to_string(i));
    for (std::size_t j = 0; j < d; ++j)
      out.train_x(i, static_cast<Eigen::Index>(j)) = pixel_row[j] / 255.0;
    unsigned char label;
    if (!lab.read(reinterpret_cast<char*>(&label), 1))
      throw Truncated("truncated IDX label data at example " + std::to_string(i));
    out.train_y[i] = label;
  }
  return out;
}

}  // namespace flatl2o
