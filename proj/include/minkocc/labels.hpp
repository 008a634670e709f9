#pragma once

#include "minkocc/geometry.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace minkocc {

inline constexpr int kClassCount = 18;
inline constexpr int kFreeClass = 17;
/// Pseudo-label value for pixels without a 2D label.
inline constexpr int kUnlabeled = 0;

enum SemanticClass : int {
    kOthers = 0,
    kBarrier = 1,
    kBicycle = 2,
    kBus = 3,
    kCar = 4,
    kConstructionVehicle = 5,
    kMotorcycle = 6,
    kPedestrian = 7,
    kTrafficCone = 8,
    kTrailer = 9,
    kTruck = 10,
    kDriveableSurface = 11,
    kOtherFlat = 12,
    kSidewalk = 13,
    kTerrain = 14,
    kManmade = 15,
    kVegetation = 16,
};

inline constexpr std::array<std::string_view, kClassCount> kClassNames{
    "others",   "barrier",    "bicycle",          "bus",        "car",     "construction_vehicle",
    "motorcycle", "pedestrian", "traffic_cone",   "trailer",    "truck",   "driveable_surface",
    "other_flat", "sidewalk",   "terrain",        "manmade",    "vegetation", "free"};

/// RGB palette used by the renderer and the CLI.
inline constexpr std::array<std::array<std::uint8_t, 3>, kClassCount> kPalette{{
    {0, 0, 0},       {255, 120, 50},  {255, 192, 203}, {255, 255, 0},  {0, 150, 245},   {0, 255, 255},
    {200, 180, 0},   {255, 0, 0},     {255, 240, 150}, {135, 60, 0},   {160, 32, 240},  {255, 0, 255},
    {139, 137, 137}, {75, 0, 75},     {150, 240, 80},  {230, 230, 250}, {0, 175, 0},    {255, 255, 255}}};

/// Labeled X×Y×Z grid with a visibility mask (cells with mask 0 are excluded
/// from metrics). Index order follows GridConfig::linear.
struct DenseVoxelGrid {
    GridConfig grid;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> mask;

    static DenseVoxelGrid filled(const GridConfig& g, int label = kFreeClass, bool visible = true) {
        return {g, std::vector<std::uint8_t>(g.cell_count(), static_cast<std::uint8_t>(label)),
                std::vector<std::uint8_t>(g.cell_count(), visible ? 1 : 0)};
    }

    int at(int x, int y, int z) const { return labels[grid.linear(x, y, z)]; }
    void set(int x, int y, int z, int label) { labels[grid.linear(x, y, z)] = static_cast<std::uint8_t>(label); }
    bool visible(int x, int y, int z) const { return mask[grid.linear(x, y, z)] != 0; }

    void validate() const {
        if (labels.size() != grid.cell_count() || mask.size() != grid.cell_count())
            throw std::invalid_argument("dense grid: shape does not match grid config");
        for (auto l : labels)
            if (l >= kClassCount) throw std::invalid_argument("dense grid: label out of range");
    }

    /// Per-class voxel counts over the whole grid.
    std::array<std::uint64_t, kClassCount> class_counts() const {
        std::array<std::uint64_t, kClassCount> n{};
        for (auto l : labels) ++n[l];
        return n;
    }
};

}  // namespace minkocc
