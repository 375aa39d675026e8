#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sdseg/tensor.hpp"

namespace testutil {

// Central finite differences in 64-bit against the analytic reverse-mode
// grads. Returns the max relative error over all elements of all leaves.
inline double max_fd_rel_err(const std::function<sdseg::Tensord()>& loss_fn,
                             const std::vector<sdseg::Tensord>& leaves, double h = 1e-4) {
    for (const auto& leaf : leaves) const_cast<sdseg::Tensord&>(leaf).zero_grad();
    sdseg::Tensord loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (const auto& leaf : leaves) {
        if (!leaf.has_grad()) throw std::runtime_error("fd check: leaf missing grad");
        analytic.push_back(leaf.grad());
    }

    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto leaf = leaves[li];
        auto& vals = leaf.mutable_data();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double lp = loss_fn().item();
            vals[i] = orig - h;
            const double lm = loss_fn().item();
            vals[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = analytic[li][i];
            const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-6});
            worst = std::max(worst, std::fabs(fd - an) / denom);
        }
    }
    return worst;
}

// unique scratch dir under the build tree, removed on destruction
struct TmpDir {
    std::filesystem::path path;
    explicit TmpDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("sdseg_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TmpDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

}  // namespace testutil
