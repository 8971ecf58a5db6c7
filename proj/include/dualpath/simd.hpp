#pragma once

#include <cmath>
#include <cstddef>

#if defined(__AVX2__)
#include <immintrin.h>
// glibc libmvec kernel (the one -ffast-math vectorization would emit); keeps
// full double range with ~1-2 ulp error
extern "C" __m256d _ZGVdN4v_exp(__m256d);
#endif

namespace dualpath {

// Bulk exp. Callers always start a call at a fixed logical offset (row or
// scratch start), so results for the same input block are identical no matter
// how examples are packed around it.
inline void vexp(const double* in, double* out, std::size_t n) {
    std::size_t i = 0;
#if defined(__AVX2__)
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _ZGVdN4v_exp(_mm256_loadu_pd(in + i)));
#endif
    for (; i < n; ++i) out[i] = std::exp(in[i]);
}

// Bulk logistic sigmoid via exp(-|x|): s = e/(1+e) for x < 0, 1/(1+e)
// otherwise.
inline void vsigmoid(const double* in, double* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] = -std::abs(in[i]);
    vexp(out, out, n);
    for (std::size_t i = 0; i < n; ++i) {
        const double e = out[i];
        out[i] = in[i] >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
    }
}

}  // namespace dualpath
