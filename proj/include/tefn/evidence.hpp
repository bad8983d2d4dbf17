#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

// Minimal Dempster-Shafer / fuzzy membership toolkit. The forecasting model
// never calls into this; it exists so the mass-function semantics the BPA
// layer builds on can be tested and exported on their own.

namespace tefn::evidence {

struct SpaceMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct TotalConflict : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NotNormalized : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonPositiveSigma : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Subset of the sample space as a bitmask: bit i set <=> element i in the set.
struct FocalSet {
    std::uint32_t bits = 0;

    std::size_t cardinality() const { return std::popcount(bits); }
    bool empty() const { return bits == 0; }
    bool contains(std::size_t element) const {
        return (bits >> element) & 1u;
    }
    FocalSet intersect(FocalSet other) const { return {bits & other.bits}; }

    auto operator<=>(const FocalSet&) const = default;
};

inline constexpr std::size_t kMaxSpaceSize = 16;

// Nonnegative masses over focal sets. Normalization is deliberately not an
// invariant: combination accepts unnormalized inputs and normalizes its
// output.
class MassFunction {
public:
    explicit MassFunction(std::size_t space_size) : space_size_(space_size) {
        if (space_size == 0 || space_size > kMaxSpaceSize)
            throw std::invalid_argument("sample space size must be in [1, 16]");
    }

    std::size_t space_size() const { return space_size_; }
    FocalSet omega() const {
        return {static_cast<std::uint32_t>((1u << space_size_) - 1u)};
    }

    void set(FocalSet s, double mass) {
        if (s.bits >= (1u << space_size_))
            throw std::invalid_argument("focal set outside the sample space");
        if (mass < 0.0)
            throw std::invalid_argument("negative mass");
        if (s.empty()) {
            if (mass != 0.0)
                throw std::invalid_argument("empty set cannot carry mass");
            return;
        }
        if (mass == 0.0)
            masses_.erase(s);
        else
            masses_[s] = mass;
    }

    double mass(FocalSet s) const {
        auto it = masses_.find(s);
        return it == masses_.end() ? 0.0 : it->second;
    }

    const std::map<FocalSet, double>& masses() const { return masses_; }

    double total() const {
        double t = 0.0;
        for (auto& [s, m] : masses_) t += m;
        return t;
    }

    bool is_normalized(double eps = 1e-9) const {
        return std::abs(total() - 1.0) <= eps;
    }

    MassFunction normalized() const {
        double t = total();
        if (t <= 0.0)
            throw std::invalid_argument("cannot normalize an all-zero mass");
        MassFunction out(space_size_);
        for (auto& [s, m] : masses_) out.set(s, m / t);
        return out;
    }

private:
    std::size_t space_size_;
    std::map<FocalSet, double> masses_;
};

// Dempster-Shafer combination: m(A) proportional to
// sum over B intersect C = A of m1(B)*m2(C); conflict mass on the empty set
// is discarded and the remainder rescaled to sum to 1.
inline MassFunction dsr_combine(const MassFunction& m1, const MassFunction& m2) {
    if (m1.space_size() != m2.space_size())
        throw SpaceMismatch("mass functions live on different sample spaces");
    if (m1.masses().empty() || m2.masses().empty())
        throw std::invalid_argument("combination needs at least one nonzero mass per operand");

    std::map<FocalSet, double> acc;
    double kept = 0.0;
    for (auto& [b, mb] : m1.masses()) {
        for (auto& [c, mc] : m2.masses()) {
            FocalSet a = b.intersect(c);
            double p = mb * mc;
            if (a.empty()) continue;
            acc[a] += p;
            kept += p;
        }
    }
    if (kept <= 0.0)
        throw TotalConflict("all intersection mass fell on the empty set");

    MassFunction out(m1.space_size());
    for (auto& [s, m] : acc) out.set(s, m / kept);
    return out;
}

using ProbabilityDistribution = std::vector<double>;

// Pignistic transformation: each focal set splits its mass evenly among
// its members.
inline ProbabilityDistribution pignistic(const MassFunction& m) {
    if (!m.is_normalized())
        throw NotNormalized("pignistic transform needs a normalized mass");
    ProbabilityDistribution p(m.space_size(), 0.0);
    for (auto& [s, mass] : m.masses()) {
        double share = mass / static_cast<double>(s.cardinality());
        for (std::size_t i = 0; i < m.space_size(); ++i)
            if (s.contains(i)) p[i] += share;
    }
    return p;
}

// Triangular (affine) membership. Raw value, may be negative; the BPA layer
// of the model trains w and b freely, so no clamping happens here.
inline double triangular_membership(double x, double w, double b) {
    return w * x + b;
}

// Gaussian PDF used as a membership function.
inline double gaussian_membership(double x, double mu, double sigma) {
    if (sigma <= 0.0)
        throw NonPositiveSigma("sigma must be positive");
    double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(6.283185307179586476925286766559));
}

} // namespace tefn::evidence
