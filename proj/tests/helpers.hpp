#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "sfg/common.hpp"

namespace sfg::test {

inline Vec random_vec(Rng& rng, int n, double scale = 1.0) { return scale * standard_normal(rng, n); }

inline Mat random_spd(Rng& rng, int n, double floor = 0.2) {
    const Mat a = Mat::NullaryExpr(n, n, [&]() { return std::normal_distribution<double>(0.0, 0.5)(rng); });
    return a * a.transpose() + floor * Mat::Identity(n, n);
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("sfg_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace sfg::test

#include "sfg/datasets.hpp"

namespace sfg::test {

/// Random mixture with 1..max_k components in `dim` dimensions; roughly half the
/// components get dense covariances.
inline GmmSpec random_gmm(Rng& rng, int dim, int max_k = 4) {
    std::uniform_int_distribution<int> kd(1, max_k);
    std::uniform_real_distribution<double> u(0.2, 1.0);
    const int k = kd(rng);
    GmmSpec g;
    double total = 0.0;
    for (int i = 0; i < k; ++i) {
        GmmComponent c;
        c.weight = u(rng);
        total += c.weight;
        c.mean = random_vec(rng, dim, 1.5);
        c.cov = u(rng) < 0.6 ? Covariance::isotropic(u(rng)) : Covariance::full(random_spd(rng, dim));
        c.label = i % 2;
        g.components.push_back(std::move(c));
    }
    for (auto& c : g.components) c.weight /= total;
    return g;
}

} // namespace sfg::test

namespace sfg::test {

inline void write_text_file(const std::filesystem::path& p, const std::string& s) {
    std::ofstream os(p, std::ios::binary);
    os << s;
}

} // namespace sfg::test
