#include "flowpolicy/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace flowpolicy {

void FeatureCloud::validate() const {
    if (n < 1) throw ValidationError("feature cloud is empty");
    if (dim < 1) throw ValidationError("feature dimension must be >= 1");
    if (int(positions.size()) != n * 3) throw ValidationError("positions size mismatch");
    if (int(features.size()) != n * dim) throw ValidationError("features size mismatch");
    for (float p : positions)
        if (!std::isfinite(p)) throw ValidationError("non-finite position");
}

namespace {

struct MetricView {
    const float* data;
    int dim;
};

MetricView metric_view(const FeatureCloud& cloud, Metric metric) {
    if (metric == Metric::Spatial) return {cloud.positions.data(), 3};
    return {cloud.features.data(), cloud.dim};
}

// Sorted insertion into the running k-best squared distances of one point.
inline void kbest_insert(float* best, int k, float d2) {
    if (d2 >= best[k - 1]) return;
    int p = k - 1;
    while (p > 0 && best[p - 1] > d2) {
        best[p] = best[p - 1];
        --p;
    }
    best[p] = d2;
}

constexpr int kBlock = 1024;  // points per SoA tile (tile = dim*kBlock floats)
constexpr int kLane = 16;

}  // namespace

std::vector<float> knn_distances(const FeatureCloud& cloud, int k, Metric metric) {
    cloud.validate();
    const int n = cloud.n;
    if (k >= n) throw KTooLarge("k=" + std::to_string(k) + " with n=" + std::to_string(n));
    MetricView mv = metric_view(cloud, metric);
    const int dim = mv.dim;

    std::vector<float> best(size_t(n) * k, std::numeric_limits<float>::infinity());

    const int padded = ((kBlock + kLane - 1) / kLane) * kLane;
    std::vector<float> tile(size_t(dim) * padded);

    for (int j_base = 0; j_base < n; j_base += kBlock) {
        const int jb = std::min(kBlock, n - j_base);
        // transpose the tile to dimension-major so the inner loop runs over
        // contiguous candidate lanes
        for (int c = 0; c < dim; ++c) {
            float* row = tile.data() + size_t(c) * padded;
            for (int j = 0; j < jb; ++j) row[j] = mv.data[size_t(j_base + j) * dim + c];
            for (int j = jb; j < padded; ++j) row[j] = 0.0f;
        }
        const int jb_pad = ((jb + kLane - 1) / kLane) * kLane;

#pragma omp parallel for schedule(static)
        for (int i = 0; i < n; ++i) {
            const float* q = mv.data + size_t(i) * dim;
            float* bi = best.data() + size_t(i) * k;
            for (int j0 = 0; j0 < jb_pad; j0 += kLane) {
                float acc[kLane] = {0};
                for (int c = 0; c < dim; ++c) {
                    const float qc = q[c];
                    const float* row = tile.data() + size_t(c) * padded + j0;
#pragma omp simd
                    for (int jj = 0; jj < kLane; ++jj) {
                        float t = qc - row[jj];
                        acc[jj] += t * t;
                    }
                }
                for (int jj = 0; jj < kLane; ++jj) {
                    int j = j_base + j0 + jj;
                    if (j >= j_base + jb) break;
                    if (j == i) continue;
                    kbest_insert(bi, k, acc[jj]);
                }
            }
        }
    }

    for (float& v : best) v = std::sqrt(v);
    return best;
}

std::vector<float> knn_distances_serial(const FeatureCloud& cloud, int k, Metric metric) {
    cloud.validate();
    const int n = cloud.n;
    if (k >= n) throw KTooLarge("k=" + std::to_string(k) + " with n=" + std::to_string(n));
    MetricView mv = metric_view(cloud, metric);
    const int dim = mv.dim;

    std::vector<float> best(size_t(n) * k, std::numeric_limits<float>::infinity());
    for (int i = 0; i < n; ++i) {
        const float* q = mv.data + size_t(i) * dim;
        float* bi = best.data() + size_t(i) * k;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            const float* p = mv.data + size_t(j) * dim;
            float d2 = 0;
            for (int c = 0; c < dim; ++c) {
                float t = q[c] - p[c];
                d2 += t * t;
            }
            kbest_insert(bi, k, d2);
        }
    }
    for (float& v : best) v = std::sqrt(v);
    return best;
}

std::vector<double> dbs_weights(const FeatureCloud& cloud, int k) {
    std::vector<float> dists = knn_distances(cloud, k, Metric::Feature);
    std::vector<double> w(cloud.n);
    for (int i = 0; i < cloud.n; ++i) {
        double s = 0;
        for (int j = 0; j < k; ++j) s += dists[size_t(i) * k + j];
        w[i] = s / k;
    }
    double min_pos = std::numeric_limits<double>::infinity();
    for (double v : w)
        if (v > 0) min_pos = std::min(min_pos, v);
    if (!std::isfinite(min_pos)) {
        std::fill(w.begin(), w.end(), 1.0);  // every point is a duplicate
        return w;
    }
    for (double& v : w)
        if (v <= 0) v = min_pos * 1e-3;
    return w;
}

namespace {

SampleSelection fps_impl(const FeatureCloud& cloud, int m, SampleMethod variant,
                         int first_index, Metric metric) {
    cloud.validate();
    const int n = cloud.n;
    if (m > n) throw ValidationError("fps asked for more samples than points");
    if (m < 1) throw ValidationError("fps needs m >= 1");
    MetricView mv = metric_view(cloud, metric);
    const int dim = mv.dim;
    const bool maxmin = variant == SampleMethod::FPSMaxMin;

    SampleSelection sel;
    sel.method = variant;
    sel.indices.reserve(m);
    sel.indices.push_back(first_index);

    std::vector<char> taken(n, 0);
    taken[first_index] = 1;
    // maxmin tracks min squared distance to the set; maxavg tracks the sum of
    // true distances (argmax of sum == argmax of average)
    std::vector<float> score(n, maxmin ? std::numeric_limits<float>::infinity() : 0.0f);

    int last = first_index;
    for (int it = 1; it < m; ++it) {
        const float* q = mv.data + size_t(last) * dim;
        for (int j = 0; j < n; ++j) {
            const float* p = mv.data + size_t(j) * dim;
            float d2 = 0;
            for (int c = 0; c < dim; ++c) {
                float t = q[c] - p[c];
                d2 += t * t;
            }
            if (maxmin)
                score[j] = std::min(score[j], d2);
            else
                score[j] += std::sqrt(d2);
        }
        int best = -1;
        float best_v = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < n; ++j) {
            if (taken[j]) continue;
            if (score[j] > best_v) {
                best_v = score[j];
                best = j;
            }
        }
        taken[best] = 1;
        sel.indices.push_back(best);
        last = best;
    }
    return sel;
}

}  // namespace

SampleSelection fps(const FeatureCloud& cloud, int m, SampleMethod variant,
                    std::uint64_t seed, Metric metric) {
    if (variant != SampleMethod::FPSMaxMin && variant != SampleMethod::FPSMaxAvg)
        throw ValidationError("fps variant must be maxmin or maxavg");
    Rng rng(seed);
    int first = rng.uniform_int(cloud.n);
    return fps_impl(cloud, m, variant, first, metric);
}

SampleSelection fps_from(const FeatureCloud& cloud, int m, SampleMethod variant,
                         int first_index, Metric metric) {
    if (first_index < 0 || first_index >= cloud.n)
        throw ValidationError("fps first index out of range");
    return fps_impl(cloud, m, variant, first_index, metric);
}

SampleSelection dbs(const FeatureCloud& cloud, int m, int k, std::uint64_t seed) {
    cloud.validate();
    const int n = cloud.n;
    if (m > n) throw ValidationError("dbs asked for more samples than points");
    if (k >= n) throw KTooLarge("k=" + std::to_string(k) + " with n=" + std::to_string(n));

    std::vector<double> w = dbs_weights(cloud, k);

    // Exponential race: key_i = -log(u_i) / w_i; the m smallest keys are a
    // without-replacement sample with probabilities proportional to w.
    Rng rng(seed);
    std::vector<std::pair<double, int>> keys(n);
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        if (u < 1e-300) u = 1e-300;
        keys[i] = {-std::log(u) / w[i], i};
    }
    std::partial_sort(keys.begin(), keys.begin() + m, keys.end());

    SampleSelection sel;
    sel.method = SampleMethod::DBS;
    sel.indices.reserve(m);
    for (int i = 0; i < m; ++i) sel.indices.push_back(keys[i].second);
    return sel;
}

SampleSelection uniform_sample(const FeatureCloud& cloud, int m, std::uint64_t seed) {
    cloud.validate();
    if (m > cloud.n) throw ValidationError("uniform sample larger than cloud");
    std::vector<int> idx(cloud.n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (int i = 0; i < m; ++i) {
        int j = i + rng.uniform_int(cloud.n - i);
        std::swap(idx[i], idx[j]);
    }
    SampleSelection sel;
    sel.method = SampleMethod::Uniform;
    sel.indices.assign(idx.begin(), idx.begin() + m);
    return sel;
}

FeatureCloud gather(const FeatureCloud& cloud, const std::vector<int>& indices) {
    FeatureCloud out;
    out.n = int(indices.size());
    out.dim = cloud.dim;
    out.positions.resize(size_t(out.n) * 3);
    out.features.resize(size_t(out.n) * cloud.dim);
    for (int i = 0; i < out.n; ++i) {
        int src = indices[i];
        std::memcpy(&out.positions[size_t(i) * 3], &cloud.positions[size_t(src) * 3],
                    3 * sizeof(float));
        std::memcpy(&out.features[size_t(i) * cloud.dim], &cloud.features[size_t(src) * cloud.dim],
                    size_t(cloud.dim) * sizeof(float));
    }
    return out;
}

FeatureCloud subsample_tokens(const FeatureCloud& cloud, double ratio,
                              SampleMethod method, std::uint64_t seed) {
    cloud.validate();
    if (!(ratio > 0.0) || ratio > 1.0) throw ValidationError("subsample ratio must be in (0,1]");
    int m = int(std::ceil(ratio * cloud.n));
    if (m >= cloud.n) return cloud;

    SampleSelection sel;
    switch (method) {
        case SampleMethod::DBS: {
            int k = std::min(8, cloud.n - 1);
            sel = dbs(cloud, m, k, seed);
            break;
        }
        case SampleMethod::FPSMaxMin:
        case SampleMethod::FPSMaxAvg:
            sel = fps(cloud, m, method, seed);
            break;
        case SampleMethod::Uniform:
            sel = uniform_sample(cloud, m, seed);
            break;
    }
    return gather(cloud, sel.indices);
}

}  // namespace flowpolicy
