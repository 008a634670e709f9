#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace minkocc::sparse {

/// Integer voxel coordinate with a batch index.
struct Coordinate {
    std::int32_t batch = 0;
    std::int32_t x = 0;
    std::int32_t y = 0;
    std::int32_t z = 0;

    friend bool operator==(const Coordinate&, const Coordinate&) = default;
    friend auto operator<=>(const Coordinate&, const Coordinate&) = default;
};

inline Coordinate operator+(Coordinate c, const Coordinate& offset) {
    c.x += offset.x;
    c.y += offset.y;
    c.z += offset.z;
    return c;
}

/// splitmix64 finalizer over the packed key.
inline std::uint64_t hash_coordinate(const Coordinate& c) {
    std::uint64_t h = static_cast<std::uint32_t>(c.batch);
    auto mix = [](std::uint64_t v) {
        v += 0x9e3779b97f4a7c15ULL;
        v = (v ^ (v >> 30)) * 0xbf58476d1ce4e5b9ULL;
        v = (v ^ (v >> 27)) * 0x94d049bb133111ebULL;
        return v ^ (v >> 31);
    };
    h = mix(h ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.x)) << 21));
    h = mix(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.y)));
    h = mix(h ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.z)) << 11));
    return h;
}

/// Round toward negative infinity to a multiple of `stride`.
inline std::int32_t floor_to_stride(std::int32_t v, std::int32_t stride) {
    const std::int32_t q = v >= 0 ? v / stride : -((-v + stride - 1) / stride);
    return q * stride;
}

inline bool divisible(const Coordinate& c, std::int32_t stride) {
    return c.x % stride == 0 && c.y % stride == 0 && c.z % stride == 0;
}

/// Open-addressing map from Coordinate to row. Rows follow first-insertion
/// order; duplicate inserts return the existing row.
class CoordinateIndex {
public:
    CoordinateIndex() { rehash(16); }

    explicit CoordinateIndex(std::span<const Coordinate> coords) {
        rehash(capacity_for(coords.size()));
        for (const auto& c : coords) insert(c);
    }

    /// Returns (row, inserted).
    std::pair<int, bool> insert(const Coordinate& c) {
        if ((coords_.size() + 1) * 2 > slots_.size()) rehash(slots_.size() * 2);
        std::size_t s = hash_coordinate(c) & mask_;
        while (true) {
            const int row = slots_[s];
            if (row < 0) {
                slots_[s] = static_cast<int>(coords_.size());
                coords_.push_back(c);
                return {slots_[s], true};
            }
            if (coords_[static_cast<std::size_t>(row)] == c) return {row, false};
            s = (s + 1) & mask_;
        }
    }

    std::optional<int> find(const Coordinate& c) const {
        std::size_t s = hash_coordinate(c) & mask_;
        while (true) {
            const int row = slots_[s];
            if (row < 0) return std::nullopt;
            if (coords_[static_cast<std::size_t>(row)] == c) return row;
            s = (s + 1) & mask_;
        }
    }

    /// -1 when absent.
    int row_of(const Coordinate& c) const { return find(c).value_or(-1); }
    bool contains(const Coordinate& c) const { return find(c).has_value(); }

    std::size_t size() const { return coords_.size(); }
    bool empty() const { return coords_.empty(); }
    const std::vector<Coordinate>& coordinates() const { return coords_; }
    const Coordinate& operator[](std::size_t row) const { return coords_[row]; }

private:
    static std::size_t capacity_for(std::size_t n) {
        std::size_t cap = 16;
        while (cap < n * 2 + 2) cap *= 2;
        return cap;
    }

    void rehash(std::size_t capacity) {
        slots_.assign(capacity, -1);
        mask_ = capacity - 1;
        for (std::size_t row = 0; row < coords_.size(); ++row) {
            std::size_t s = hash_coordinate(coords_[row]) & mask_;
            while (slots_[s] >= 0) s = (s + 1) & mask_;
            slots_[s] = static_cast<int>(row);
        }
    }

    std::vector<Coordinate> coords_;
    std::vector<int> slots_;
    std::size_t mask_ = 0;
};

inline CoordinateIndex build_coordinate_index(std::span<const Coordinate> coords) {
    return CoordinateIndex(coords);
}

}  // namespace minkocc::sparse
