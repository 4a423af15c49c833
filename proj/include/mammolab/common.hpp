#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace mammolab {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define MAMMOLAB_ERROR(Name)                                              \
    struct Name : Error {                                                 \
        explicit Name(const std::string& what = #Name) : Error(what) {}   \
    }

// corpus
MAMMOLAB_ERROR(MalformedRecord);
MAMMOLAB_ERROR(UnknownTask);
MAMMOLAB_ERROR(LabelOutOfRange);
MAMMOLAB_ERROR(DuplicateImageId);
MAMMOLAB_ERROR(EmptyManifest);

// preprocess / phantom
MAMMOLAB_ERROR(EmptyImage);
MAMMOLAB_ERROR(LesionOutOfBounds);

// encoders / checkpoints
MAMMOLAB_ERROR(ShapeMismatch);
MAMMOLAB_ERROR(BadMagic);
MAMMOLAB_ERROR(VersionMismatch);
MAMMOLAB_ERROR(TruncatedFile);
MAMMOLAB_ERROR(KindMismatch);

// pretraining
MAMMOLAB_ERROR(MaskLengthMismatch);
MAMMOLAB_ERROR(BatchTooSmall);
MAMMOLAB_ERROR(EmptyTrainSplit);
MAMMOLAB_ERROR(DimMismatch);
MAMMOLAB_ERROR(NoLabeledRecords);
MAMMOLAB_ERROR(TeacherLoadFailure);
MAMMOLAB_ERROR(BadConfig);

// heads
MAMMOLAB_ERROR(NoBoxAnnotations);
MAMMOLAB_ERROR(NoMasks);
MAMMOLAB_ERROR(TaskAbsent);
MAMMOLAB_ERROR(TaskDegenerate);
MAMMOLAB_ERROR(NoQAPairs);

// retrieval
MAMMOLAB_ERROR(EmptyGallery);
MAMMOLAB_ERROR(KExceedsGallery);

// evalstats
MAMMOLAB_ERROR(EmptyClass);
MAMMOLAB_ERROR(DegenerateLabels);
MAMMOLAB_ERROR(EmptySample);
MAMMOLAB_ERROR(MissingCell);
MAMMOLAB_ERROR(KOutOfTableRange);

// harness
MAMMOLAB_ERROR(NoCompletedVariants);
MAMMOLAB_ERROR(IoError);

#undef MAMMOLAB_ERROR

// All randomness in the library flows through explicitly seeded engines so
// that every pipeline stage is reproducible from its seed alone.
using Rng = std::mt19937_64;

// Splitmix-style stream derivation: independent child seeds from one parent
// seed plus a stream index, without correlated low bits.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Deterministic integer in [0, n) from an engine. Modulo bias is irrelevant
// at the sample sizes used here and the result is identical on every
// platform, unlike uniform_int_distribution.
inline std::size_t rand_index(Rng& rng, std::size_t n) {
    return static_cast<std::size_t>(rng() % n);
}

inline double rand_uniform(Rng& rng, double lo = 0.0, double hi = 1.0) {
    // 53-bit mantissa draw, bit-stable across platforms.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
}

inline double rand_normal(Rng& rng) {
    // Box-Muller on the stable uniform above (std::normal_distribution is
    // not bit-portable).
    double u1 = rand_uniform(rng);
    double u2 = rand_uniform(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace mammolab
