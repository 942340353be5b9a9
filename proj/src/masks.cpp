#include "supergseg/masks.hpp"

#include "supergseg/binary_io.hpp"

#include <map>
#include <set>

namespace supergseg {

std::size_t Bitmap::area() const {
  std::size_t n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

int LabelMap::max_id() const {
  int m = -1;
  for (int v : ids) m = std::max(m, v);
  return m;
}

void MaskSet::validate() const {
  if (masks.empty()) throw IngestionError("view " + std::to_string(view_id) + ": empty mask set");
  for (std::size_t m = 0; m < masks.size(); ++m) {
    const auto& b = masks[m];
    if (b.width != width || b.height != height || b.bits.size() != static_cast<std::size_t>(width) * height) {
      throw IngestionError("view " + std::to_string(view_id) + ": mask " + std::to_string(m) + " has mismatched dimensions");
    }
    if (b.area() == 0) throw IngestionError("view " + std::to_string(view_id) + ": mask " + std::to_string(m) + " is empty");
  }
}

PatchSplit decompose_to_patches(const MaskSet& masks) {
  masks.validate();
  PatchSplit out;
  out.patch_map = LabelMap(masks.width, masks.height, -1);
  std::map<std::vector<int>, int> ids;
  std::vector<int> covering;
  for (std::size_t p = 0; p < out.patch_map.pixel_count(); ++p) {
    covering.clear();
    for (std::size_t m = 0; m < masks.masks.size(); ++m) {
      if (masks.masks[m](p)) covering.push_back(static_cast<int>(m));
    }
    if (covering.empty()) continue;
    auto [it, inserted] = ids.try_emplace(covering, static_cast<int>(out.patch_masksets.size()));
    if (inserted) {
      if (static_cast<int>(out.patch_masksets.size()) >= kMaxPatchesPerView) {
        throw IngestionError("view " + std::to_string(masks.view_id) + ": more than " + std::to_string(kMaxPatchesPerView) +
                             " patches; supply coarser masks");
      }
      out.patch_masksets.push_back(covering);
    }
    out.patch_map.ids[p] = it->second;
  }
  return out;
}

std::vector<std::vector<int>> correlation_matrix(const std::vector<std::vector<int>>& patch_masksets) {
  const std::size_t n = patch_masksets.size();
  std::vector<std::vector<int>> corr(n, std::vector<int>(n, 0));
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = p; q < n; ++q) {
      const auto& a = patch_masksets[p];
      const auto& b = patch_masksets[q];
      int shared = 0;
      for (std::size_t i = 0, j = 0; i < a.size() && j < b.size();) {
        if (a[i] == b[j]) {
          ++shared;
          ++i;
          ++j;
        } else if (a[i] < b[j]) {
          ++i;
        } else {
          ++j;
        }
      }
      corr[p][q] = corr[q][p] = shared;
    }
  }
  return corr;
}

std::vector<std::vector<int>> level_sets(int patch, const std::vector<std::vector<int>>& corr) {
  const auto& row = corr.at(static_cast<std::size_t>(patch));
  std::set<int, std::greater<>> values;
  for (int v : row) {
    if (v > 0) values.insert(v);
  }
  std::vector<std::vector<int>> levels;
  for (int v : values) {
    std::vector<int> level;
    for (std::size_t q = 0; q < row.size(); ++q) {
      if (row[q] == v) level.push_back(static_cast<int>(q));
    }
    levels.push_back(std::move(level));
  }
  return levels;
}

InstanceGrouping group_instances(const PatchSplit& split, const MaskSet& masks) {
  std::vector<std::size_t> area(masks.masks.size());
  for (std::size_t m = 0; m < masks.masks.size(); ++m) area[m] = masks.masks[m].area();

  InstanceGrouping out;
  std::map<int, int> mask_to_instance;
  for (const auto& set : split.patch_masksets) {
    int best = set.front();
    for (int m : set) {
      if (area[m] > area[best]) best = m;
    }
    auto [it, inserted] = mask_to_instance.try_emplace(best, static_cast<int>(out.instance_masks.size()));
    if (inserted) out.instance_masks.push_back(best);
    out.patch_instance.push_back(it->second);
  }
  out.instance_map = LabelMap(split.patch_map.width, split.patch_map.height, -1);
  for (std::size_t p = 0; p < split.patch_map.pixel_count(); ++p) {
    const int id = split.patch_map.ids[p];
    if (id >= 0) out.instance_map.ids[p] = out.patch_instance[id];
  }
  return out;
}

PatchDecomposition build_decomposition(const MaskSet& masks) {
  PatchSplit split = decompose_to_patches(masks);
  InstanceGrouping grouping = group_instances(split, masks);
  PatchDecomposition d;
  d.corr = correlation_matrix(split.patch_masksets);
  for (int p = 0; p < static_cast<int>(split.patch_masksets.size()); ++p) d.levels.push_back(level_sets(p, d.corr));
  d.patch_map = std::move(split.patch_map);
  d.patch_masksets = std::move(split.patch_masksets);
  d.instance_map = std::move(grouping.instance_map);
  d.instance_masks = std::move(grouping.instance_masks);
  return d;
}

std::string encode_mask_set(const MaskSet& masks) {
  masks.validate();
  ByteWriter w;
  w.raw("SGMK");
  w.u32(static_cast<std::uint32_t>(masks.width));
  w.u32(static_cast<std::uint32_t>(masks.height));
  w.u32(static_cast<std::uint32_t>(masks.masks.size()));
  const std::size_t pixels = static_cast<std::size_t>(masks.width) * masks.height;
  const std::size_t stride = (pixels + 7) / 8;
  for (const auto& b : masks.masks) {
    std::string packed(stride, '\0');
    for (std::size_t p = 0; p < pixels; ++p) {
      if (b(p)) packed[p / 8] = static_cast<char>(static_cast<unsigned char>(packed[p / 8]) | (0x80u >> (p % 8)));
    }
    w.raw(packed);
  }
  return w.take();
}

MaskSet decode_mask_set(std::string_view bytes, int view_id) {
  ByteReader r(bytes);
  if (r.raw(4) != "SGMK") throw ParseError("bad mask file magic", 0);
  MaskSet out;
  out.view_id = view_id;
  out.width = static_cast<int>(r.u32());
  out.height = static_cast<int>(r.u32());
  const std::uint32_t count = r.u32();
  const std::size_t pixels = static_cast<std::size_t>(out.width) * out.height;
  const std::size_t stride = (pixels + 7) / 8;
  for (std::uint32_t m = 0; m < count; ++m) {
    const auto packed = r.raw(stride);
    Bitmap b(out.width, out.height);
    for (std::size_t p = 0; p < pixels; ++p) {
      b.bits[p] = (static_cast<unsigned char>(packed[p / 8]) & (0x80u >> (p % 8))) ? 1 : 0;
    }
    out.masks.push_back(std::move(b));
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after mask payload", r.offset());
  return out;
}

void write_mask_set(const MaskSet& masks, const std::filesystem::path& path) { write_file(path, encode_mask_set(masks)); }

MaskSet read_mask_set(const std::filesystem::path& path, int view_id) { return decode_mask_set(read_file(path), view_id); }

std::string encode_label_map(const LabelMap& map, std::string_view magic) {
  ByteWriter w;
  w.raw(magic);
  w.u32(static_cast<std::uint32_t>(map.width));
  w.u32(static_cast<std::uint32_t>(map.height));
  w.raw(pack_i32(map.ids));
  return w.take();
}

LabelMap decode_label_map(std::string_view bytes, std::string_view magic) {
  ByteReader r(bytes);
  if (r.raw(4) != magic) throw ParseError("bad label map magic, expected " + std::string(magic), 0);
  LabelMap map;
  map.width = static_cast<int>(r.u32());
  map.height = static_cast<int>(r.u32());
  map.ids = unpack_i32(r.raw(static_cast<std::size_t>(map.width) * map.height * 4));
  if (r.remaining() != 0) throw ParseError("trailing bytes after label map", r.offset());
  return map;
}

void write_label_map(const LabelMap& map, std::string_view magic, const std::filesystem::path& path) {
  write_file(path, encode_label_map(map, magic));
}

LabelMap read_label_map(const std::filesystem::path& path, std::string_view magic) {
  return decode_label_map(read_file(path), magic);
}

}  // namespace supergseg
