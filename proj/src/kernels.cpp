#include "crit/kernels.hpp"

#include <exception>

#include <omp.h>

namespace crit::kernels {

int max_threads() { return omp_get_max_threads(); }

std::vector<double> score(const LabeledDataset& ds, std::span<const std::uint32_t> indices, const BatchScorer& fn,
                          std::size_t chunk) {
    require(chunk > 0, ErrorKind::usage, "chunk size must be positive");
    const bool all = indices.empty();
    const std::size_t n = all ? ds.size() : indices.size();
    const std::size_t in = ds.input_dim();
    std::vector<double> out(n);
    const auto chunks = static_cast<std::ptrdiff_t>((n + chunk - 1) / chunk);
    std::exception_ptr error;

#pragma omp parallel
    {
        nn::Matrix X;
        std::vector<std::uint32_t> local;
#pragma omp for schedule(dynamic, 1)
        for (std::ptrdiff_t c = 0; c < chunks; ++c) {
            const std::size_t begin = static_cast<std::size_t>(c) * chunk;
            const std::size_t len = std::min(chunk, n - begin);
            try {
                if (all) {
                    local.resize(len);
                    for (std::size_t k = 0; k < len; ++k) local[k] = static_cast<std::uint32_t>(begin + k);
                } else {
                    local.assign(indices.begin() + static_cast<std::ptrdiff_t>(begin),
                                 indices.begin() + static_cast<std::ptrdiff_t>(begin + len));
                }
                X.resize(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(in));
                ds.fill_batch(std::span<const std::uint32_t>(local), std::span<double>(X.data(), len * in));
                fn(X, std::span<double>(out.data() + begin, len));
            } catch (...) {
#pragma omp critical(crit_kernel_error)
                if (!error) error = std::current_exception();
            }
        }
    }
    if (error) std::rethrow_exception(error);
    return out;
}

std::vector<double> score_serial(const LabeledDataset& ds, std::span<const std::uint32_t> indices,
                                 const SampleScorer& fn) {
    const bool all = indices.empty();
    const std::size_t n = all ? ds.size() : indices.size();
    std::vector<double> x(ds.input_dim());
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        ds.fill_window(all ? k : indices[k], x);
        out[k] = fn(x);
    }
    return out;
}

std::vector<double> score_rows(const nn::Matrix& X, const BatchScorer& fn, std::size_t chunk) {
    require(chunk > 0, ErrorKind::usage, "chunk size must be positive");
    const auto n = static_cast<std::size_t>(X.rows());
    std::vector<double> out(n);
    const auto chunks = static_cast<std::ptrdiff_t>((n + chunk - 1) / chunk);
    std::exception_ptr error;
#pragma omp parallel for schedule(dynamic, 1)
    for (std::ptrdiff_t c = 0; c < chunks; ++c) {
        const std::size_t begin = static_cast<std::size_t>(c) * chunk;
        const std::size_t len = std::min(chunk, n - begin);
        try {
            const nn::Matrix block = X.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(len));
            fn(block, std::span<double>(out.data() + begin, len));
        } catch (...) {
#pragma omp critical(crit_kernel_error)
            if (!error) error = std::current_exception();
        }
    }
    if (error) std::rethrow_exception(error);
    return out;
}

}  // namespace crit::kernels
