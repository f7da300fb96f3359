#include "winmamba/voxelgrid.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace winmamba {

void SparseVoxelSet::check() const {
  if (features.rows() != size()) {
    throw ContractError("voxel set has " + std::to_string(size()) + " coords but " +
                        std::to_string(features.rows()) + " feature rows");
  }
  for (const Coord& c : coords) {
    for (int a = 0; a < 3; ++a) {
      if (c[a] < 0 || c[a] >= grid_extent[a]) {
        throw ContractError("voxel coord " + triple_str(c) + " outside grid extent " +
                            triple_str(grid_extent));
      }
    }
  }
  std::vector<Coord> sorted = coords;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ContractError("duplicate voxel coordinates");
  }
}

VoxelBinning bin_points(const PointCloud& cloud, const Vec3& cell) {
  if (cell.x <= 0.0 || cell.y <= 0.0 || cell.z <= 0.0) {
    throw ContractError("voxel cell sizes must be positive");
  }
  if (!cloud.bounds.valid()) throw ContractError("invalid point-cloud bounds");
  const Vec3 lo = cloud.bounds.min;
  const Vec3 hi = cloud.bounds.max;
  VoxelBinning out;
  out.grid_extent = {static_cast<int64_t>(std::ceil((hi.x - lo.x) / cell.x)),
                     static_cast<int64_t>(std::ceil((hi.y - lo.y) / cell.y)),
                     static_cast<int64_t>(std::ceil((hi.z - lo.z) / cell.z))};
  std::map<Coord, std::vector<int64_t>> cells;
  for (int64_t i = 0; i < cloud.count; ++i) {
    const double* p = cloud.point(i);
    if (p[0] < lo.x || p[0] >= hi.x || p[1] < lo.y || p[1] >= hi.y || p[2] < lo.z ||
        p[2] >= hi.z) {
      continue;
    }
    Coord c{static_cast<int64_t>(std::floor((p[0] - lo.x) / cell.x)),
            static_cast<int64_t>(std::floor((p[1] - lo.y) / cell.y)),
            static_cast<int64_t>(std::floor((p[2] - lo.z) / cell.z))};
    for (int a = 0; a < 3; ++a) c[a] = std::min(c[a], out.grid_extent[a] - 1);
    cells[c].push_back(i);
  }
  out.coords.reserve(cells.size());
  out.members.reserve(cells.size());
  for (auto& [coord, members] : cells) {
    out.coords.push_back(coord);
    out.members.push_back(std::move(members));
  }
  return out;
}

SparseVoxelSet voxelize(PassContext& ctx, const PointCloud& cloud, const Vec3& cell, int channels,
                        const std::string& prefix) {
  VoxelBinning bins = bin_points(cloud, cell);
  const int raw = 3 + cloud.extra_channels;
  DiffArray w = ctx.param(prefix + ".w", Shape(raw, channels), init_uniform_fan_in(raw));
  DiffArray b = ctx.param(prefix + ".b", Shape(channels), init_constant(0.0));

  SparseVoxelSet set;
  set.grid_extent = bins.grid_extent;
  set.stride = {1, 1, 1};
  set.coords = bins.coords;
  const int64_t n = set.size();
  if (n == 0) {
    set.features = DiffArray::zeros(Shape(0, channels));
    return set;
  }

  // Raw feature: mean over member points of (offset from cell center, extras).
  // Members are averaged in a value-canonical order so the result is bitwise
  // independent of input point order.
  std::vector<double> rawfeat(static_cast<size_t>(n * raw), 0.0);
  const Vec3 lo = cloud.bounds.min;
  std::vector<std::vector<double>> rows;
  for (int64_t v = 0; v < n; ++v) {
    const Coord& c = set.coords[static_cast<size_t>(v)];
    const double cx = lo.x + (static_cast<double>(c[0]) + 0.5) * cell.x;
    const double cy = lo.y + (static_cast<double>(c[1]) + 0.5) * cell.y;
    const double cz = lo.z + (static_cast<double>(c[2]) + 0.5) * cell.z;
    rows.clear();
    for (int64_t pi : bins.members[static_cast<size_t>(v)]) {
      const double* p = cloud.point(pi);
      std::vector<double> row(static_cast<size_t>(raw));
      row[0] = p[0] - cx;
      row[1] = p[1] - cy;
      row[2] = p[2] - cz;
      for (int e = 0; e < cloud.extra_channels; ++e) row[static_cast<size_t>(3 + e)] = p[3 + e];
      rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end());
    double* dst = rawfeat.data() + v * raw;
    for (const auto& row : rows) {
      for (int j = 0; j < raw; ++j) dst[j] += row[static_cast<size_t>(j)];
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (int j = 0; j < raw; ++j) dst[j] *= inv;
  }
  set.features = linear(DiffArray::from(Shape(n, raw), std::move(rawfeat)), w, b);
  return set;
}

CoordMap group_by_factor(const SparseVoxelSet& set, const Triple& factor) {
  for (int a = 0; a < 3; ++a) {
    if (factor[a] < 1) throw ContractError("sampling factor must be >= 1 per axis");
  }
  CoordMap map;
  map.factor = factor;
  map.source_coords = set.coords;
  map.source_stride = set.stride;
  map.source_extent = set.grid_extent;

  std::map<Coord, std::vector<int64_t>> cells;
  for (int64_t i = 0; i < set.size(); ++i) {
    const Coord& c = set.coords[static_cast<size_t>(i)];
    cells[{c[0] / factor[0], c[1] / factor[1], c[2] / factor[2]}].push_back(i);
  }
  map.parent_coords.reserve(cells.size());
  map.children.reserve(cells.size());
  for (auto& [coord, members] : cells) {
    // pooling order canonicalized by child coordinate, not input row order
    std::sort(members.begin(), members.end(), [&](int64_t x, int64_t y) {
      return set.coords[static_cast<size_t>(x)] < set.coords[static_cast<size_t>(y)];
    });
    map.parent_coords.push_back(coord);
    map.children.push_back(std::move(members));
  }
  return map;
}

std::pair<SparseVoxelSet, CoordMap> downsample(PassContext& ctx, const SparseVoxelSet& set,
                                               const Triple& factor, const std::string& prefix) {
  CoordMap map = group_by_factor(set, factor);
  const int64_t channels = set.features.cols();
  DiffArray w =
      ctx.param(prefix + ".w", Shape(channels, channels), init_uniform_fan_in(channels));
  DiffArray b = ctx.param(prefix + ".b", Shape(channels), init_constant(0.0));

  SparseVoxelSet out;
  out.coords = map.parent_coords;
  out.stride = {set.stride[0] * factor[0], set.stride[1] * factor[1], set.stride[2] * factor[2]};
  out.grid_extent = {ceil_div(set.grid_extent[0], factor[0]),
                     ceil_div(set.grid_extent[1], factor[1]),
                     ceil_div(set.grid_extent[2], factor[2])};
  if (set.empty()) {
    out.features = DiffArray::zeros(Shape(0, channels));
    return {std::move(out), std::move(map)};
  }
  out.features = linear(segment_mean(set.features, map.children), w, b);
  return {std::move(out), std::move(map)};
}

SparseVoxelSet upsample(PassContext& ctx, const SparseVoxelSet& set, const CoordMap& map,
                        const std::string& prefix) {
  if (set.coords != map.parent_coords) {
    throw ContractError("upsample: voxel set does not match the recorded coordinate map");
  }
  const int64_t channels = set.features.cols();
  DiffArray w =
      ctx.param(prefix + ".w", Shape(channels, channels), init_uniform_fan_in(channels));
  DiffArray b = ctx.param(prefix + ".b", Shape(channels), init_constant(0.0));

  SparseVoxelSet out;
  out.coords = map.source_coords;
  out.stride = map.source_stride;
  out.grid_extent = map.source_extent;
  const int64_t n = static_cast<int64_t>(map.source_coords.size());
  if (n == 0) {
    out.features = DiffArray::zeros(Shape(0, channels));
    return out;
  }
  std::vector<int64_t> parent_of(static_cast<size_t>(n), -1);
  for (int64_t p = 0; p < map.parents(); ++p) {
    for (int64_t child : map.children[static_cast<size_t>(p)]) {
      parent_of[static_cast<size_t>(child)] = p;
    }
  }
  for (int64_t v : parent_of) {
    if (v < 0) throw ContractError("coordinate map children do not cover the source rows");
  }
  out.features = linear(gather_rows(set.features, parent_of), w, b);
  return out;
}

// ---- file formats -----------------------------------------------------------------

namespace {

void update_count(PointCloud& cloud) {
  cloud.count = static_cast<int64_t>(cloud.data.size()) / cloud.row_width();
}

}  // namespace

PointCloud read_point_cloud_text(std::istream& in, const Aabb& bounds) {
  PointCloud cloud;
  cloud.bounds = bounds;
  std::string line;
  int width = -1;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<double> row;
    double v;
    while (ls >> v) row.push_back(v);
    if (row.empty()) continue;
    if (row.size() < 3) {
      throw DataError("line " + std::to_string(line_no) + ": expected at least x y z");
    }
    if (width < 0) {
      width = static_cast<int>(row.size());
      cloud.extra_channels = width - 3;
    } else if (static_cast<int>(row.size()) != width) {
      throw DataError("line " + std::to_string(line_no) + ": inconsistent column count");
    }
    for (double x : row) {
      if (!std::isfinite(x)) {
        throw DataError("line " + std::to_string(line_no) + ": non-finite coordinate");
      }
    }
    cloud.data.insert(cloud.data.end(), row.begin(), row.end());
  }
  update_count(cloud);
  return cloud;
}

PointCloud read_point_cloud_binary(std::istream& in, const Aabb& bounds) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PCB1", 4) != 0) {
    throw DataError("bad magic, expected PCB1");
  }
  uint32_t count = 0, channels = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  in.read(reinterpret_cast<char*>(&channels), 4);
  if (!in) throw DataError("truncated binary header");
  if (channels > 1024) throw DataError("implausible channel count");
  PointCloud cloud;
  cloud.bounds = bounds;
  cloud.extra_channels = static_cast<int>(channels);
  const int64_t width = 3 + static_cast<int64_t>(channels);
  std::vector<float> row(static_cast<size_t>(width));
  cloud.data.reserve(static_cast<size_t>(count) * static_cast<size_t>(width));
  for (uint32_t i = 0; i < count; ++i) {
    if (!in.read(reinterpret_cast<char*>(row.data()), width * 4)) {
      throw DataError("truncated binary point data at row " + std::to_string(i));
    }
    for (float f : row) {
      if (!std::isfinite(f)) throw DataError("non-finite coordinate at row " + std::to_string(i));
      cloud.data.push_back(static_cast<double>(f));
    }
  }
  update_count(cloud);
  return cloud;
}

PointCloud read_point_cloud(const std::string& path, const Aabb& bounds) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open input file: " + path);
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  in.clear();
  in.seekg(0);
  try {
    if (std::memcmp(magic, "PCB1", 4) == 0) return read_point_cloud_binary(in, bounds);
    return read_point_cloud_text(in, bounds);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

void write_point_cloud_text(std::ostream& out, const PointCloud& cloud) {
  out.precision(17);
  for (int64_t i = 0; i < cloud.count; ++i) {
    const double* p = cloud.point(i);
    for (int j = 0; j < cloud.row_width(); ++j) out << (j ? " " : "") << p[j];
    out << "\n";
  }
}

void write_point_cloud_binary(std::ostream& out, const PointCloud& cloud) {
  out.write("PCB1", 4);
  const uint32_t count = static_cast<uint32_t>(cloud.count);
  const uint32_t channels = static_cast<uint32_t>(cloud.extra_channels);
  out.write(reinterpret_cast<const char*>(&count), 4);
  out.write(reinterpret_cast<const char*>(&channels), 4);
  for (int64_t i = 0; i < cloud.count; ++i) {
    const double* p = cloud.point(i);
    for (int j = 0; j < cloud.row_width(); ++j) {
      const float f = static_cast<float>(p[j]);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
  }
}

}  // namespace winmamba
