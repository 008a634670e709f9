#pragma once

#include "minkocc/ad/tape.hpp"
#include "minkocc/sparse/coordinate.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

namespace minkocc::sparse {

using CoordinateSet = std::shared_ptr<const CoordinateIndex>;

/// COO voxel tensor: unique coordinates at a common stride plus an N×d
/// feature matrix recorded on a tape.
struct SparseVoxelTensor {
    CoordinateSet coords;
    ad::Var features;
    int stride = 1;

    std::size_t size() const { return coords ? coords->size() : 0; }
    bool empty() const { return size() == 0; }
    Index channels() const { return features.cols(); }
    const std::vector<Coordinate>& coordinates() const { return coords->coordinates(); }
    ad::Tape& tape() const { return *features.tape(); }

    std::vector<int> batch_ids() const {
        std::vector<int> ids;
        ids.reserve(size());
        for (const auto& c : coordinates()) ids.push_back(c.batch);
        return ids;
    }
    int batch_count() const {
        int n = 0;
        for (const auto& c : coordinates()) n = std::max(n, c.batch + 1);
        return n;
    }

    /// Same coordinates, new features.
    SparseVoxelTensor with_features(ad::Var f) const {
        if (static_cast<std::size_t>(f.rows()) != size()) throw std::invalid_argument("with_features: row count");
        return SparseVoxelTensor{coords, f, stride};
    }
};

inline void validate(const SparseVoxelTensor& t) {
    if (!t.coords) throw std::invalid_argument("sparse tensor without coordinates");
    if (t.stride <= 0) throw std::invalid_argument("stride must be positive");
    if (static_cast<std::size_t>(t.features.rows()) != t.coords->size())
        throw std::invalid_argument("feature rows do not match coordinate count");
    for (const auto& c : t.coordinates())
        if (!divisible(c, t.stride)) throw std::invalid_argument("coordinate not divisible by tensor stride");
    const Matrix& f = t.features.value();
    for (Index i = 0; i < f.size(); ++i)
        if (!std::isfinite(f.data()[i])) throw std::invalid_argument("non-finite feature value");
}

/// Builds a tensor from coordinates (must be unique) and features.
inline SparseVoxelTensor make_tensor(ad::Tape& tape, const std::vector<Coordinate>& coords, Matrix features,
                                     int stride = 1, bool requires_grad = false) {
    auto index = std::make_shared<CoordinateIndex>(coords);
    if (index->size() != coords.size()) throw std::invalid_argument("duplicate coordinates in sparse tensor");
    ad::Var f = requires_grad ? tape.variable(std::move(features)) : tape.constant(std::move(features));
    SparseVoxelTensor t{index, f, stride};
    validate(t);
    return t;
}

inline SparseVoxelTensor make_tensor(const CoordinateSet& coords, ad::Var features, int stride) {
    SparseVoxelTensor t{coords, features, stride};
    if (static_cast<std::size_t>(features.rows()) != coords->size())
        throw std::invalid_argument("feature rows do not match coordinate count");
    return t;
}

}  // namespace minkocc::sparse
