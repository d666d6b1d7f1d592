#pragma once

#include <vector>

#include "flowpolicy/common.hpp"

namespace flowpolicy {

// Positions in the global frame plus per-point feature vectors. Row-major
// flat storage: positions[i*3 + c], features[i*dim + c].
struct FeatureCloud {
    int n = 0;
    int dim = 0;
    std::vector<float> positions;
    std::vector<float> features;

    void validate() const;
};

enum class SampleMethod { FPSMaxMin, FPSMaxAvg, DBS, Uniform };

struct SampleSelection {
    std::vector<int> indices;  // distinct, deterministic given seed
    SampleMethod method = SampleMethod::DBS;
};

enum class Metric { Feature, Spatial };

// Distances (not squared) to the k nearest other points, ascending per row.
// Exact brute force; the OpenMP kernel and the serial reference compute the
// same sums in the same order.
std::vector<float> knn_distances(const FeatureCloud& cloud, int k, Metric metric);
std::vector<float> knn_distances_serial(const FeatureCloud& cloud, int k, Metric metric);

// Mean k-NN distance per point in feature space; zero weights (exact
// duplicates) are replaced by the smallest positive weight * 1e-3.
std::vector<double> dbs_weights(const FeatureCloud& cloud, int k);

// Farthest point sampling. First pick uniform under the seed, then each pick
// maximizes the min (maxmin) or average (maxavg) distance to the selected
// set, ties broken by lowest index. Sequential by nature; not parallelized.
SampleSelection fps(const FeatureCloud& cloud, int m, SampleMethod variant,
                    std::uint64_t seed, Metric metric = Metric::Feature);
SampleSelection fps_from(const FeatureCloud& cloud, int m, SampleMethod variant,
                         int first_index, Metric metric = Metric::Feature);

// Density-biased sampling: m draws without replacement with probability
// proportional to the mean k-NN feature distance, realized as an exponential
// race (key = -log(u)/w, keep the m smallest keys).
SampleSelection dbs(const FeatureCloud& cloud, int m, int k, std::uint64_t seed);

SampleSelection uniform_sample(const FeatureCloud& cloud, int m, std::uint64_t seed);

// Keep ceil(ratio * n) tokens using the given method (k=8 for DBS).
FeatureCloud subsample_tokens(const FeatureCloud& cloud, double ratio,
                              SampleMethod method, std::uint64_t seed);

FeatureCloud gather(const FeatureCloud& cloud, const std::vector<int>& indices);

}  // namespace flowpolicy
