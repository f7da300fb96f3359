#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include "winmamba/voxelgrid.hpp"

namespace winmamba::testing {

// Random sparse voxel set with unique coords and uniform features.
inline SparseVoxelSet random_voxel_set(std::mt19937_64& rng, int64_t max_voxels,
                                       const Triple& extent, int64_t channels,
                                       bool sorted_coords = false) {
  std::set<Coord> unique;
  std::uniform_int_distribution<int64_t> dx(0, extent[0] - 1);
  std::uniform_int_distribution<int64_t> dy(0, extent[1] - 1);
  std::uniform_int_distribution<int64_t> dz(0, extent[2] - 1);
  const int64_t target = std::max<int64_t>(1, max_voxels);
  for (int64_t tries = 0; tries < target * 4 && static_cast<int64_t>(unique.size()) < target;
       ++tries) {
    unique.insert({dx(rng), dy(rng), dz(rng)});
  }
  std::vector<Coord> coords(unique.begin(), unique.end());
  if (!sorted_coords) std::shuffle(coords.begin(), coords.end(), rng);

  SparseVoxelSet set;
  set.coords = std::move(coords);
  set.grid_extent = extent;
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> feat(static_cast<size_t>(set.size() * channels));
  for (double& v : feat) v = dist(rng);
  set.features = DiffArray::from(Shape(set.size(), channels), std::move(feat));
  return set;
}

inline SparseVoxelSet dense_grid(int64_t nx, int64_t ny, int64_t nz, int64_t channels = 1) {
  SparseVoxelSet set;
  set.grid_extent = {nx, ny, nz};
  for (int64_t x = 0; x < nx; ++x) {
    for (int64_t y = 0; y < ny; ++y) {
      for (int64_t z = 0; z < nz; ++z) set.coords.push_back({x, y, z});
    }
  }
  std::vector<double> feat(static_cast<size_t>(set.size() * channels));
  for (size_t i = 0; i < feat.size(); ++i) feat[i] = static_cast<double>(i % 97) * 0.05;
  set.features = DiffArray::from(Shape(set.size(), channels), std::move(feat));
  return set;
}

inline SparseVoxelSet permuted_copy(const SparseVoxelSet& set, std::mt19937_64& rng) {
  std::vector<int64_t> perm(static_cast<size_t>(set.size()));
  for (int64_t i = 0; i < set.size(); ++i) perm[static_cast<size_t>(i)] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  SparseVoxelSet out;
  out.stride = set.stride;
  out.grid_extent = set.grid_extent;
  out.coords.resize(set.coords.size());
  std::vector<double> feat(static_cast<size_t>(set.size() * set.features.cols()));
  const int64_t c = set.features.cols();
  for (int64_t i = 0; i < set.size(); ++i) {
    const int64_t src = perm[static_cast<size_t>(i)];
    out.coords[static_cast<size_t>(i)] = set.coords[static_cast<size_t>(src)];
    for (int64_t j = 0; j < c; ++j) {
      feat[static_cast<size_t>(i * c + j)] = set.features.at(src, j);
    }
  }
  out.features = DiffArray::from(Shape(set.size(), c), std::move(feat));
  return out;
}

}  // namespace winmamba::testing
