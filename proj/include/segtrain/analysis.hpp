#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "segtrain/common.hpp"
#include "segtrain/engine.hpp"
#include "segtrain/matrix.hpp"

namespace segtrain {

// ----- exact rational arithmetic -----
// Coefficients of the read-error distribution are small rationals in J, S and
// (for dyadic keep-probabilities) p, so the enumeration can run in exact
// arithmetic and identities hold with no floating-point slop.

struct Rational {
    long long num = 0;
    long long den = 1;

    static Rational make(long long n, long long d) { return reduce(n, d); }

    static Rational reduce(__int128 n, __int128 d) {
        if (d == 0) throw std::invalid_argument("rational with zero denominator");
        if (d < 0) {
            n = -n;
            d = -d;
        }
        __int128 a = n < 0 ? -n : n, b = d;
        while (b != 0) {
            __int128 t = a % b;
            a = b;
            b = t;
        }
        if (a != 0) {
            n /= a;
            d /= a;
        }
        const __int128 lim = static_cast<__int128>(0x7fffffffffffffffLL);
        if (n > lim || n < -lim || d > lim) throw std::overflow_error("rational overflow");
        Rational r;
        r.num = static_cast<long long>(n);
        r.den = static_cast<long long>(d);
        return r;
    }

    Rational operator+(const Rational& o) const {
        return reduce(static_cast<__int128>(num) * o.den + static_cast<__int128>(o.num) * den,
                      static_cast<__int128>(den) * o.den);
    }
    Rational operator-(const Rational& o) const {
        return reduce(static_cast<__int128>(num) * o.den - static_cast<__int128>(o.num) * den,
                      static_cast<__int128>(den) * o.den);
    }
    Rational operator*(const Rational& o) const {
        return reduce(static_cast<__int128>(num) * o.num, static_cast<__int128>(den) * o.den);
    }
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
    bool operator!=(const Rational& o) const { return !(*this == o); }
    bool zero() const { return num == 0; }

    // one correctly rounded division; both parts stay well inside 2^53 here
    double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }

    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
};

// Exact rational form of a double, if its dyadic expansion has a denominator
// no larger than max_den. Returns nothing for values like 0.3 that are not
// exactly representable as small rationals.
inline std::optional<Rational> rational_from_double(double x, long long max_den = (1LL << 24)) {
    if (!std::isfinite(x)) return std::nullopt;
    for (long long den = 1; den <= max_den; den <<= 1) {
        double scaled = x * static_cast<double>(den);
        if (scaled != std::floor(scaled)) continue;
        if (std::abs(scaled) > 9.0e15) return std::nullopt;
        long long num = static_cast<long long>(scaled);
        if (static_cast<double>(num) / static_cast<double>(den) == x)
            return Rational::make(num, den);
    }
    return std::nullopt;
}

// ----- read-error model -----
//
// One training step reads J segment embeddings; S of them are recomputed
// fresh, the rest come from the table (value h-tilde instead of the fresh h).
// delta_j is the difference between what the aggregation consumes for segment
// j and the all-fresh unit-weight reference:
//   plain table   selected: 0          non-selected: h~ - h
//   with dropout  selected: (1-p)(J-S)/S * h
//                 non-selected: h~ - h with prob p, else -h
// Everything is expressed in the basis (h, h~ - h).

enum class Scheme { plain_table, stale_dropout };

inline std::string to_string(Scheme s) {
    return s == Scheme::plain_table ? "plain-table" : "stale-dropout";
}

struct PerturbationModel {
    int J = 4;
    int S = 1;
    double p = 0.5;
    std::vector<Mat> fresh;  // h_j, each 1 x dim
    std::vector<Mat> stale;  // h~_j

    int dim() const { return fresh.empty() ? 0 : fresh[0].cols; }

    void validate() const {
        if (J < 1 || S < 1 || S > J) throw ConfigError("need 1 <= S <= J");
        if (p < 0.0 || p > 1.0) throw ConfigError("p must lie in [0,1]");
        if (static_cast<int>(fresh.size()) != J || static_cast<int>(stale.size()) != J)
            throw ConfigError("need J fresh and J stale vectors");
        for (int j = 0; j < J; ++j) {
            if (fresh[static_cast<std::size_t>(j)].rows != 1 ||
                stale[static_cast<std::size_t>(j)].rows != 1 ||
                fresh[static_cast<std::size_t>(j)].cols != dim() ||
                stale[static_cast<std::size_t>(j)].cols != dim())
                throw ConfigError("embedding vectors must share shape 1 x dim");
        }
    }

    static PerturbationModel random(int J, int S, double p, int dim, std::uint64_t seed) {
        PerturbationModel m;
        m.J = J;
        m.S = S;
        m.p = p;
        Rng rng = derived_rng(seed, "perturb-model");
        for (int j = 0; j < J; ++j) {
            Mat h(1, dim), t(1, dim);
            for (int i = 0; i < dim; ++i) {
                h.at(0, i) = rng.normal();
                t.at(0, i) = h.at(0, i) + 0.3 * rng.normal();
            }
            m.fresh.push_back(std::move(h));
            m.stale.push_back(std::move(t));
        }
        m.validate();
        return m;
    }
};

// all-fresh unit-weight reference point the deltas are measured against
inline Mat clean_aggregate(const PerturbationModel& m) {
    Mat u0(1, m.dim());
    for (const auto& h : m.fresh) axpy(1.0, h, u0);
    return scale(u0, 1.0 / static_cast<double>(m.J));
}

// per-segment moment coefficients in the (h, h~-h) basis
struct SegmentCoeffs {
    Rational mean_fresh, mean_drift;           // E[delta]
    Rational sq_fresh, sq_drift, sq_cross;     // E[delta (.) delta]
};

struct SegmentCoeffsD {
    double mean_fresh = 0.0, mean_drift = 0.0;
    double sq_fresh = 0.0, sq_drift = 0.0, sq_cross = 0.0;
};

struct DeltaMoments {
    bool exact = false;                        // rational path available for p
    std::vector<SegmentCoeffs> coeffs;         // valid when exact
    std::vector<SegmentCoeffsD> coeffs_d;      // always filled
    std::vector<Mat> mean;                     // realized E[delta_j], 1 x dim
    std::vector<Mat> second;                   // realized E[delta_j (.) delta_j]
    Mat agg_mean;                              // E[Delta], Delta = mean_j delta_j
    Mat agg_outer;                             // E[Delta Delta^T], dim x dim
    long long outcomes = 0;
};

// closed forms the enumeration must reproduce exactly
inline Rational table_mean_drift_coeff(int J, int S) { return Rational::make(J - S, J); }
inline Rational dropout_mean_drift_coeff(int J, int S, const Rational& p) {
    return p * table_mean_drift_coeff(J, S);
}
inline Rational table_sq_drift_coeff(int J, int S) { return Rational::make(J - S, J); }
inline Rational dropout_sq_drift_coeff(int J, int S, const Rational& p) {
    return p * Rational::make(J - S, J);
}
inline Rational dropout_sq_fresh_coeff(int J, int S, const Rational& p) {
    Rational q = Rational::make(1, 1) - p;  // drop probability
    return q * q * Rational::make(static_cast<long long>(J - S) * (J - S),
                                  static_cast<long long>(S) * J) +
           q * Rational::make(J - S, J);
}

namespace detail {

inline long long binom(int n, int k) {
    if (k < 0 || k > n) return 0;
    long long r = 1;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

// lexicographic advance over k-subsets of {0..n-1}; false when exhausted
inline bool next_combination(std::vector<int>& c, int n) {
    int k = static_cast<int>(c.size());
    for (int i = k - 1; i >= 0; --i) {
        if (c[static_cast<std::size_t>(i)] < n - k + i) {
            ++c[static_cast<std::size_t>(i)];
            for (int j = i + 1; j < k; ++j)
                c[static_cast<std::size_t>(j)] = c[static_cast<std::size_t>(j - 1)] + 1;
            return true;
        }
    }
    return false;
}

}  // namespace detail

// Exhaustive expectation over the C(J,S) selections and, for the dropout
// scheme, the 2^(J-S) keep/drop masks. Rationals carry the per-segment
// coefficients whenever p is an exact dyadic; doubles carry them always, plus
// the aggregate mean and second-moment matrix.
inline DeltaMoments exact_delta_moments(const PerturbationModel& m, Scheme scheme) {
    m.validate();
    if (m.J > 20) throw ConfigError("enumeration supports J <= 20");
    const int J = m.J, S = m.S, d = m.dim();
    DeltaMoments out;
    std::optional<Rational> p_rat = rational_from_double(m.p);
    out.exact = p_rat.has_value();
    out.coeffs.assign(static_cast<std::size_t>(J), SegmentCoeffs{});
    out.coeffs_d.assign(static_cast<std::size_t>(J), SegmentCoeffsD{});
    out.agg_mean = Mat(1, d);
    out.agg_outer = Mat(d, d);

    const long long C = detail::binom(J, S);
    const Rational inv_c = Rational::make(1, C);
    const Rational one = Rational::make(1, 1);
    const Rational keep = out.exact ? *p_rat : Rational{};
    const Rational drop = out.exact ? one - keep : Rational{};
    const Rational sel_fresh =
        out.exact ? (one - keep) * Rational::make(J - S, S) : Rational{};
    const double sel_fresh_d = (1.0 - m.p) * static_cast<double>(J - S) / static_cast<double>(S);

    std::vector<int> sel(static_cast<std::size_t>(S));
    std::iota(sel.begin(), sel.end(), 0);
    std::vector<char> is_sel(static_cast<std::size_t>(J), 0);
    // per-outcome coefficient of each segment's delta in the (h, drift) basis
    std::vector<double> ch(static_cast<std::size_t>(J)), cd(static_cast<std::size_t>(J));
    Mat delta(1, d);

    do {
        std::fill(is_sel.begin(), is_sel.end(), 0);
        for (int s : sel) is_sel[static_cast<std::size_t>(s)] = 1;
        std::vector<int> nonsel;
        for (int j = 0; j < J; ++j)
            if (!is_sel[static_cast<std::size_t>(j)]) nonsel.push_back(j);
        const int M = static_cast<int>(nonsel.size());
        const long long masks = scheme == Scheme::stale_dropout ? (1LL << M) : 1;

        for (long long mask = 0; mask < masks; ++mask) {
            Rational w_rat = inv_c;
            double w = 1.0 / static_cast<double>(C);
            for (int j = 0; j < J; ++j) {
                if (is_sel[static_cast<std::size_t>(j)]) {
                    ch[static_cast<std::size_t>(j)] =
                        scheme == Scheme::stale_dropout ? sel_fresh_d : 0.0;
                    cd[static_cast<std::size_t>(j)] = 0.0;
                }
            }
            for (int k = 0; k < M; ++k) {
                int j = nonsel[static_cast<std::size_t>(k)];
                bool kept = scheme == Scheme::plain_table || ((mask >> k) & 1);
                ch[static_cast<std::size_t>(j)] = kept ? 0.0 : -1.0;
                cd[static_cast<std::size_t>(j)] = kept ? 1.0 : 0.0;
                if (scheme == Scheme::stale_dropout) {
                    w *= kept ? m.p : 1.0 - m.p;
                    if (out.exact) w_rat = w_rat * (kept ? keep : drop);
                }
            }

            for (int j = 0; j < J; ++j) {
                const double cj = ch[static_cast<std::size_t>(j)];
                const double dj = cd[static_cast<std::size_t>(j)];
                auto& cad = out.coeffs_d[static_cast<std::size_t>(j)];
                cad.mean_fresh += w * cj;
                cad.mean_drift += w * dj;
                cad.sq_fresh += w * cj * cj;
                cad.sq_drift += w * dj * dj;
                cad.sq_cross += w * 2.0 * cj * dj;
                if (out.exact) {
                    auto rat_of = [](double v) {
                        auto r = rational_from_double(v);
                        if (!r) throw std::logic_error("coefficient not rational");
                        return *r;
                    };
                    Rational cr = is_sel[static_cast<std::size_t>(j)] &&
                                          scheme == Scheme::stale_dropout
                                      ? sel_fresh
                                      : rat_of(cj);
                    Rational dr = rat_of(dj);
                    auto& ca = out.coeffs[static_cast<std::size_t>(j)];
                    ca.mean_fresh = ca.mean_fresh + w_rat * cr;
                    ca.mean_drift = ca.mean_drift + w_rat * dr;
                    ca.sq_fresh = ca.sq_fresh + w_rat * cr * cr;
                    ca.sq_drift = ca.sq_drift + w_rat * dr * dr;
                    ca.sq_cross = ca.sq_cross + w_rat * Rational::make(2, 1) * cr * dr;
                }
            }

            // aggregate delta for this outcome
            std::fill(delta.a.begin(), delta.a.end(), 0.0);
            for (int j = 0; j < J; ++j) {
                const Mat& h = m.fresh[static_cast<std::size_t>(j)];
                const Mat& t = m.stale[static_cast<std::size_t>(j)];
                const double cj = ch[static_cast<std::size_t>(j)];
                const double dj = cd[static_cast<std::size_t>(j)];
                for (int i = 0; i < d; ++i) {
                    double v = 0.0;
                    if (cj != 0.0) v += cj * h.at(0, i);
                    if (dj != 0.0) v += dj * (t.at(0, i) - h.at(0, i));
                    delta.at(0, i) += v;
                }
            }
            for (int i = 0; i < d; ++i) delta.at(0, i) /= static_cast<double>(J);
            for (int i = 0; i < d; ++i) {
                out.agg_mean.at(0, i) += w * delta.at(0, i);
                for (int i2 = 0; i2 < d; ++i2)
                    out.agg_outer.at(i, i2) += w * delta.at(0, i) * delta.at(0, i2);
            }
            ++out.outcomes;
        }
    } while (detail::next_combination(sel, J));

    // realize per-segment moments from the accumulated coefficients; zero
    // coefficients are skipped so the surviving term is a single product,
    // matching how the closed forms are evaluated
    auto realize = [&](int j, double f, double dr, double sf, double sd, double sc) {
        const Mat& h = m.fresh[static_cast<std::size_t>(j)];
        const Mat& t = m.stale[static_cast<std::size_t>(j)];
        Mat mu(1, d), s2(1, d);
        for (int i = 0; i < d; ++i) {
            double drift = t.at(0, i) - h.at(0, i);
            double v = 0.0;
            if (f != 0.0) v += f * h.at(0, i);
            if (dr != 0.0) v += dr * drift;
            mu.at(0, i) = v;
            double q = 0.0;
            if (sf != 0.0) q += sf * h.at(0, i) * h.at(0, i);
            if (sd != 0.0) q += sd * drift * drift;
            if (sc != 0.0) q += sc * h.at(0, i) * drift;
            s2.at(0, i) = q;
        }
        out.mean.push_back(std::move(mu));
        out.second.push_back(std::move(s2));
    };
    for (int j = 0; j < J; ++j) {
        if (out.exact) {
            const auto& c = out.coeffs[static_cast<std::size_t>(j)];
            realize(j, c.mean_fresh.to_double(), c.mean_drift.to_double(), c.sq_fresh.to_double(),
                    c.sq_drift.to_double(), c.sq_cross.to_double());
        } else {
            const auto& c = out.coeffs_d[static_cast<std::size_t>(j)];
            realize(j, c.mean_fresh, c.mean_drift, c.sq_fresh, c.sq_drift, c.sq_cross);
        }
    }
    return out;
}

// ----- quadratic readout head -----
// For f(u) = bias + lin . u + 0.5 u^T Q u the expected loss change under the
// read-error distribution is available in closed form from the first two
// aggregate moments, so Monte Carlo has an exact target to converge to.

struct QuadraticHead {
    Mat quad;  // dim x dim
    Mat lin;   // 1 x dim
    double bias = 0.0;

    double value(const Mat& u) const {
        double v = bias + dot(lin, u);
        for (int i = 0; i < quad.rows; ++i)
            for (int j = 0; j < quad.cols; ++j) v += 0.5 * quad.at(i, j) * u.at(0, i) * u.at(0, j);
        return v;
    }

    static QuadraticHead random(int dim, std::uint64_t seed) {
        QuadraticHead h;
        h.quad = Mat(dim, dim);
        h.lin = Mat(1, dim);
        Rng rng = derived_rng(seed, "quad-head");
        for (auto& v : h.quad.a) v = 0.5 * rng.normal();
        for (auto& v : h.lin.a) v = rng.normal();
        h.bias = rng.normal();
        return h;
    }
};

// E[f(u0 + Delta) - f(u0)] exactly, from E[Delta] and E[Delta Delta^T]
inline double expected_quadratic_change(const QuadraticHead& head, const PerturbationModel& m,
                                        const DeltaMoments& mom) {
    Mat u0 = clean_aggregate(m);
    const int d = m.dim();
    double v = 0.0;
    for (int i = 0; i < d; ++i) {
        double g = head.lin.at(0, i);
        for (int j = 0; j < d; ++j)
            g += 0.5 * (head.quad.at(i, j) + head.quad.at(j, i)) * u0.at(0, j);
        v += g * mom.agg_mean.at(0, i);
    }
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) v += 0.5 * head.quad.at(i, j) * mom.agg_outer.at(i, j);
    return v;
}

struct MonteCarloEstimate {
    double mean = 0.0;
    double stderr_ = 0.0;
    long long trials = 0;
};

// samples the same read-error distribution the enumeration integrates
inline MonteCarloEstimate monte_carlo_bias(const QuadraticHead& head,
                                                       const PerturbationModel& m, Scheme scheme,
                                                       long long trials, std::uint64_t seed) {
    m.validate();
    if (trials < 2) throw ConfigError("need at least 2 trials");
    Mat u0 = clean_aggregate(m);
    const double f0 = head.value(u0);
    const int J = m.J, S = m.S, d = m.dim();
    const double sel_fresh = (1.0 - m.p) * static_cast<double>(J - S) / static_cast<double>(S);
    Rng rng = derived_rng(seed, "mc-bias");
    double sum = 0.0, sumsq = 0.0;
    std::vector<int> ids(static_cast<std::size_t>(J));
    Mat u(1, d);
    for (long long t = 0; t < trials; ++t) {
        std::iota(ids.begin(), ids.end(), 0);
        for (int i = 0; i < S; ++i) {
            int j = i + rng.below_int(J - i);
            std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
        }
        std::vector<char> is_sel(static_cast<std::size_t>(J), 0);
        for (int i = 0; i < S; ++i) is_sel[static_cast<std::size_t>(ids[static_cast<std::size_t>(i)])] = 1;
        u = u0;
        for (int j = 0; j < J; ++j) {
            const Mat& h = m.fresh[static_cast<std::size_t>(j)];
            const Mat& tt = m.stale[static_cast<std::size_t>(j)];
            double cj, dj;
            if (is_sel[static_cast<std::size_t>(j)]) {
                cj = scheme == Scheme::stale_dropout ? sel_fresh : 0.0;
                dj = 0.0;
            } else if (scheme == Scheme::plain_table || rng.bernoulli(m.p)) {
                cj = 0.0;
                dj = 1.0;
            } else {
                cj = -1.0;
                dj = 0.0;
            }
            for (int i = 0; i < d; ++i) {
                double v = 0.0;
                if (cj != 0.0) v += cj * h.at(0, i);
                if (dj != 0.0) v += dj * (tt.at(0, i) - h.at(0, i));
                u.at(0, i) += v / static_cast<double>(J);
            }
        }
        double diff = head.value(u) - f0;
        sum += diff;
        sumsq += diff * diff;
    }
    MonteCarloEstimate est;
    est.trials = trials;
    est.mean = sum / static_cast<double>(trials);
    double var = (sumsq - sum * sum / static_cast<double>(trials)) / static_cast<double>(trials - 1);
    est.stderr_ = std::sqrt(std::max(0.0, var) / static_cast<double>(trials));
    return est;
}

// ----- staleness trace -----
// Runs table-backed training and reports, per epoch, how far the stored
// embeddings have drifted from what the current parameters would produce,
// alongside the table's age statistics. A warm-up row (distance zero by
// construction) opens the trace and a refresh row (distance zero again)
// closes it.

struct StaleTraceRow {
    std::string phase;  // "warmup" | "train" | "refresh"
    int epoch = -1;
    double max_gap = 0.0;
    double mean_gap = 0.0;
    long long stale_max = 0;
    double stale_mean = 0.0;
    std::size_t entries = 0;
};

inline std::pair<double, double> table_gap(const TrainState& st,
                                           const std::vector<const SegmentedGraph*>& graphs) {
    double mx = 0.0, sum = 0.0;
    long long n = 0;
    for (const auto* sgp : graphs) {
        for (const auto& seg : sgp->segments) {
            const EmbeddingTable::Entry* e = st.table.find(sgp->parent_id, seg.segment_id);
            if (!e) continue;
            Mat fresh = forward_segment_nograd(st.model, seg);
            double gap = max_abs_diff(e->embedding, fresh);
            mx = std::max(mx, gap);
            sum += gap;
            ++n;
        }
    }
    return {mx, n ? sum / static_cast<double>(n) : 0.0};
}

inline std::vector<StaleTraceRow> staleness_trace(
    const std::vector<const SegmentedGraph*>& train, const TrainPlan& plan,
    const ModelConfig& model_cfg, Task task) {
    plan.validate();
    if (!variant_uses_table(plan.variant))
        throw ConfigError("staleness trace needs a table-backed variant");
    TrainState st;
    st.model = Model::build(model_cfg, plan.seed);

    std::vector<StaleTraceRow> rows;
    auto record = [&](const std::string& phase, int epoch) {
        StaleTraceRow r;
        r.phase = phase;
        r.epoch = epoch;
        auto [mx, mean] = table_gap(st, train);
        r.max_gap = mx;
        r.mean_gap = mean;
        EmbeddingTable::StalenessStats ss = st.table.staleness(st.iteration);
        r.stale_max = ss.max;
        r.stale_mean = ss.mean;
        r.entries = st.table.size();
        rows.push_back(std::move(r));
    };

    refresh_all(st, train);  // warm-up: every entry starts at distance zero
    record("warmup", -1);

    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < plan.epochs; ++e) {
        Rng rng = derived_rng(plan.seed, "trace-shuffle", static_cast<std::uint64_t>(e));
        rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(plan.batch_size)) {
            std::vector<const SegmentedGraph*> batch;
            for (std::size_t i = at;
                 i < order.size() && i < at + static_cast<std::size_t>(plan.batch_size); ++i)
                batch.push_back(train[static_cast<std::size_t>(order[i])]);
            train_step(st, plan, task, batch);
        }
        record("train", e);
    }

    refresh_all(st, train);
    record("refresh", plan.epochs);
    return rows;
}

}  // namespace segtrain
