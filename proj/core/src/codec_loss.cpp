#include <string>

#include "flowssc/codec.hpp"
#include "flowssc/error.hpp"
#include "flowssc/ops.hpp"

namespace flowssc::codec {

namespace {

// Soft-affinity values are bounded away from 0 before the log, as binary
// cross-entropy against a target of 1 would clamp them.
constexpr double kLogFloor = 1e-12;

Tensor as_rows(const Tensor& logits) {
    if (logits.rank() == 2) {
        return logits;
    }
    if (logits.rank() < 2) {
        throw ShapeError("logits need a class axis, got " + shape_string(logits.shape()));
    }
    const std::size_t k = logits.dim(logits.rank() - 1);
    return ops::reshape(logits, {logits.numel() / k, k});
}

void check_labels(const Tensor& logits, std::span<const std::int32_t> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("logits " + shape_string(logits.shape()) + " vs " + std::to_string(labels.size()) + " labels");
    }
    const auto k = static_cast<std::int32_t>(logits.dim(1));
    for (auto l : labels) {
        if (l < 0 || l >= k) {
            throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
        }
    }
}

Tensor neg_log(const Tensor& x) { return ops::neg(ops::log(x, kLogFloor)); }

}  // namespace

Tensor geo_scal_loss(const Tensor& logits, std::span<const std::int32_t> labels) {
    check_labels(logits, labels);
    const std::size_t n = labels.size();
    std::vector<double> occ(n);
    double n_occ = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        occ[i] = labels[i] != 0 ? 1.0 : 0.0;
        n_occ += occ[i];
    }
    const Tensor target = Tensor::from_values({n, 1}, occ, logits.dtype());
    const Tensor p_empty = ops::narrow(ops::softmax_lastdim(logits), 1, 0, 1);
    const Tensor p_occ = ops::rsub_scalar(1.0, p_empty);
    const Tensor hit = ops::sum(ops::mul(p_occ, target));

    Tensor loss = Tensor::scalar(0.0, logits.dtype());
    if (n_occ > 0.0) {
        loss = ops::add(loss, neg_log(ops::div(hit, ops::sum(p_occ))));
        loss = ops::add(loss, neg_log(ops::mul_scalar(hit, 1.0 / n_occ)));
    }
    if (n_occ < static_cast<double>(n)) {
        const Tensor miss_free = ops::sum(ops::mul(p_empty, ops::rsub_scalar(1.0, target)));
        loss = ops::add(loss, neg_log(ops::mul_scalar(miss_free, 1.0 / (static_cast<double>(n) - n_occ))));
    }
    return loss;
}

Tensor sem_scal_loss(const Tensor& logits, std::span<const std::int32_t> labels) {
    check_labels(logits, labels);
    const std::size_t n = labels.size(), k = logits.dim(1);
    std::vector<double> onehot(n * k, 0.0), count(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        onehot[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
        count[static_cast<std::size_t>(labels[i])] += 1.0;
    }
    const Tensor target = Tensor::from_values({n, k}, onehot, logits.dtype());
    const Tensor p = ops::softmax_lastdim(logits);
    const Tensor hit = ops::sum_axis(ops::mul(p, target), 0);                                     // [K]
    const Tensor mass = ops::sum_axis(p, 0);                                                      // [K]
    const Tensor clear = ops::sum_axis(ops::mul(ops::rsub_scalar(1.0, p), ops::rsub_scalar(1.0, target)), 0);

    // Only classes present in the labels contribute; specificity additionally
    // needs at least one voxel of another class.
    std::vector<std::size_t> present, spec_classes;
    std::vector<double> inv_count, inv_rest;
    for (std::size_t c = 0; c < k; ++c) {
        if (count[c] == 0.0) {
            continue;
        }
        present.push_back(c);
        inv_count.push_back(1.0 / count[c]);
        if (count[c] < static_cast<double>(n)) {
            spec_classes.push_back(c);
            inv_rest.push_back(1.0 / (static_cast<double>(n) - count[c]));
        }
    }
    auto pick = [](const Tensor& v, const std::vector<std::size_t>& idx) {
        return ops::index_select_flat(v, idx, {idx.size()});
    };
    const Tensor hit_p = pick(hit, present);
    const Tensor precision = ops::div(hit_p, pick(mass, present));
    const Tensor recall = ops::mul(hit_p, Tensor::from_values({present.size()}, inv_count, logits.dtype()));
    Tensor total = ops::add(ops::sum(neg_log(precision)), ops::sum(neg_log(recall)));
    if (!spec_classes.empty()) {
        const Tensor specificity =
            ops::mul(pick(clear, spec_classes), Tensor::from_values({spec_classes.size()}, inv_rest, logits.dtype()));
        total = ops::add(total, ops::sum(neg_log(specificity)));
    }
    return ops::mul_scalar(total, 1.0 / static_cast<double>(present.size()));
}

LossTerms codec_loss(const Tensor& logits, const VoxelGrid& gt, const LossWeights& weights) {
    const Tensor rows = as_rows(logits);
    if (rows.dim(0) != gt.size() || rows.dim(1) != static_cast<std::size_t>(gt.num_classes())) {
        throw ShapeError("codec_loss: logits " + shape_string(logits.shape()) + " vs grid of " +
                         std::to_string(gt.size()) + " voxels, " + std::to_string(gt.num_classes()) + " classes");
    }
    const std::vector<std::int32_t> labels(gt.labels().begin(), gt.labels().end());
    LossTerms t;
    t.ce = ops::cross_entropy(rows, labels);
    t.geo = geo_scal_loss(rows, labels);
    t.sem = sem_scal_loss(rows, labels);
    t.total = ops::mul_scalar(t.ce, weights.ce);
    if (weights.geo != 0.0) {
        t.total = ops::add(t.total, ops::mul_scalar(t.geo, weights.geo));
    }
    if (weights.sem != 0.0) {
        t.total = ops::add(t.total, ops::mul_scalar(t.sem, weights.sem));
    }
    return t;
}

}  // namespace flowssc::codec
