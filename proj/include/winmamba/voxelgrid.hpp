#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "winmamba/numerics.hpp"

namespace winmamba {

// Flat point storage: count rows of (x, y, z, extra channels...).
struct PointCloud {
  std::vector<double> data;
  int64_t count = 0;
  int extra_channels = 0;
  Aabb bounds;

  int row_width() const { return 3 + extra_channels; }
  const double* point(int64_t i) const { return data.data() + i * row_width(); }
};

// Sparse voxel grid level: integer coordinates with one feature row each.
// stride is the physical size of one cell in base-voxel multiples per axis.
struct SparseVoxelSet {
  std::vector<Coord> coords;
  DiffArray features;  // n x C
  Triple stride{1, 1, 1};
  Triple grid_extent{0, 0, 0};

  int64_t size() const { return static_cast<int64_t>(coords.size()); }
  bool empty() const { return coords.empty(); }
  void check() const;  // coords unique, in range, aligned with features
};

// Recorded partition of a source voxel set into parent cells, sufficient to
// invert the downsampling exactly (children reference source row indices and
// the full source layout is retained).
struct CoordMap {
  std::vector<Coord> parent_coords;
  std::vector<std::vector<int64_t>> children;
  Triple factor{1, 1, 1};
  std::vector<Coord> source_coords;
  Triple source_stride{1, 1, 1};
  Triple source_extent{0, 0, 0};

  int64_t parents() const { return static_cast<int64_t>(parent_coords.size()); }
};

// Deterministic binning of points into voxel cells; reusable for label
// assignment at any resolution.
struct VoxelBinning {
  std::vector<Coord> coords;                    // sorted lexicographically
  std::vector<std::vector<int64_t>> members;    // point row indices per voxel
  Triple grid_extent{0, 0, 0};
};

// Half-open boxes [min, max): points on the upper boundary are dropped.
VoxelBinning bin_points(const PointCloud& cloud, const Vec3& cell);

// Mean of (offset-from-cell-center, extras) over member points, then one
// linear layer to `channels`. An empty result is an explicit empty-scene
// signal, not an error.
SparseVoxelSet voxelize(PassContext& ctx, const PointCloud& cloud, const Vec3& cell, int channels,
                        const std::string& prefix = "vfe");

// Grouping of coords by floor-division only; shared by downsample.
CoordMap group_by_factor(const SparseVoxelSet& set, const Triple& factor);

// Parent coord = floor(child / d); children mean-pooled then projected C->C.
std::pair<SparseVoxelSet, CoordMap> downsample(PassContext& ctx, const SparseVoxelSet& set,
                                               const Triple& factor, const std::string& prefix);

// Replicates each parent row to its recorded children and projects C->C; the
// output restores the source sparsity pattern exactly.
SparseVoxelSet upsample(PassContext& ctx, const SparseVoxelSet& set, const CoordMap& map,
                        const std::string& prefix);

// ---- point-cloud file formats -------------------------------------------------
// Text: one point per line `x y z [c1 c2 ...]`, '#' comments.
// Binary: magic "PCB1", little-endian u32 point count, u32 extra-channel
// count, then float32 rows of width 3 + channels.

PointCloud read_point_cloud(const std::string& path, const Aabb& bounds);
PointCloud read_point_cloud_text(std::istream& in, const Aabb& bounds);
PointCloud read_point_cloud_binary(std::istream& in, const Aabb& bounds);
void write_point_cloud_text(std::ostream& out, const PointCloud& cloud);
void write_point_cloud_binary(std::ostream& out, const PointCloud& cloud);

}  // namespace winmamba
