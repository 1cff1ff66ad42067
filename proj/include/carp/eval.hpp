#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "carp/numerics.hpp"

namespace carp {

/// l2-normalized features with their labels.
struct EmbeddingBank {
  Matrix features;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return features.rows(); }
};

inline EmbeddingBank make_bank(const Matrix& features, std::vector<int> labels, int num_classes) {
  require(features.rows() == labels.size(), "make_bank: feature/label count mismatch");
  for (int l : labels)
    require(l >= 0 && l < num_classes, "make_bank: label out of range");
  return {normalize_rows(features), std::move(labels), num_classes};
}

// ---------------------------------------------------------------------------
// Weighted k-NN: the k most cosine-similar bank rows each vote for their label
// with weight exp(sim / tau).

struct KnnPrediction {
  int label = -1;
  std::vector<double> scores;
};

inline constexpr std::size_t kNoExclusion = static_cast<std::size_t>(-1);

/// `exclude` drops one bank row from the candidates (leave-one-out queries).
inline KnnPrediction knn_predict(const EmbeddingBank& bank, std::span<const double> query,
                                 std::size_t k, double tau, std::size_t exclude = kNoExclusion) {
  const std::size_t candidates = bank.size() - (exclude < bank.size() ? 1 : 0);
  require(k >= 1 && k <= candidates, "knn_predict: need 1 <= k <= bank size");
  require(tau > 0.0, "knn_predict: tau must be > 0");
  require(query.size() == bank.features.cols(), "knn_predict: query width mismatch");

  std::vector<double> sims(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) sims[i] = dot(bank.features.row(i), query);
  std::vector<std::size_t> order;
  order.reserve(candidates);
  for (std::size_t i = 0; i < bank.size(); ++i)
    if (i != exclude) order.push_back(i);
  // Equal similarities resolve to the lower bank index.
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&sims](std::size_t a, std::size_t b) {
                      return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
                    });

  KnnPrediction out;
  out.scores.assign(static_cast<std::size_t>(bank.num_classes), 0.0);
  for (std::size_t n = 0; n < k; ++n) {
    const std::size_t idx = order[n];
    out.scores[static_cast<std::size_t>(bank.labels[idx])] += std::exp(sims[idx] / tau);
  }
  out.label = static_cast<int>(std::max_element(out.scores.begin(), out.scores.end()) -
                               out.scores.begin());
  return out;
}

/// Fraction of queries (rows, labels) whose k-NN prediction is correct.
inline double knn_accuracy(const EmbeddingBank& bank, const EmbeddingBank& queries,
                           std::size_t k, double tau) {
  require(queries.size() >= 1, "knn_accuracy: no queries");
  std::size_t correct = 0;
  for (std::size_t q = 0; q < queries.size(); ++q)
    if (knn_predict(bank, queries.features.row(q), k, tau).label == queries.labels[q]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(queries.size());
}

/// Leave-one-out accuracy of the bank against itself.
inline double knn_loo_accuracy(const EmbeddingBank& bank, std::size_t k, double tau) {
  require(bank.size() >= 2, "knn_loo_accuracy: need at least two samples");
  std::size_t correct = 0;
  for (std::size_t q = 0; q < bank.size(); ++q)
    if (knn_predict(bank, bank.features.row(q), k, tau, q).label == bank.labels[q]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(bank.size());
}

// ---------------------------------------------------------------------------
// Spherical k-means.

struct KMeansResult {
  std::vector<int> assignments;
  Matrix centroids;
  /// Sum over points of cos(x, assigned centroid), best redo.
  double objective = -std::numeric_limits<double>::infinity();
  std::size_t best_redo = 0;
  /// Objective after every assignment step, per redo.
  std::vector<std::vector<double>> objective_trace;
};

namespace detail {

inline Matrix kmeans_plus_plus(const Matrix& x, std::size_t k, Rng& rng) {
  const std::size_t m = x.rows();
  Matrix centroids(k, x.cols());
  std::vector<bool> chosen(m, false);
  std::vector<double> dist2(m, std::numeric_limits<double>::infinity());
  std::size_t pick = static_cast<std::size_t>(rng.below(m));
  for (std::size_t c = 0; c < k; ++c) {
    chosen[pick] = true;
    std::copy(x.row(pick).begin(), x.row(pick).end(), centroids.row(c).begin());
    if (c + 1 == k) break;
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      // |a - b|^2 = 2 - 2 cos on the unit sphere
      const double d = std::max(0.0, 2.0 - 2.0 * dot(x.row(i), centroids.row(c)));
      dist2[i] = std::min(dist2[i], d);
      if (!chosen[i]) total += dist2[i];
    }
    if (total > 0.0) {
      double target = rng.uniform() * total;
      pick = m;
      for (std::size_t i = 0; i < m; ++i) {
        if (chosen[i] || dist2[i] == 0.0) continue;
        pick = i;
        target -= dist2[i];
        if (target < 0.0) break;
      }
    } else {
      // Every remaining point coincides with a centroid.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < m; ++i)
        if (!chosen[i]) rest.push_back(i);
      pick = rest[static_cast<std::size_t>(rng.below(rest.size()))];
    }
  }
  return centroids;
}

/// Assigns each row to its most similar centroid (lowest index on ties) and
/// returns the summed similarity.
inline double assign_points(const Matrix& x, const Matrix& centroids, std::vector<int>& assign,
                            std::vector<double>& best_sim) {
  double objective = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
      const double s = dot(x.row(i), centroids.row(c));
      if (s > best) {
        best = s;
        arg = static_cast<int>(c);
      }
    }
    assign[i] = arg;
    best_sim[i] = best;
    objective += best;
  }
  return objective;
}

}  // namespace detail

/// Lloyd iterations on unit-normalized rows with k-means++ seeding, repeated
/// `redos` times; the redo with the highest cosine objective wins (earliest on ties).
/// An emptied cluster is reseeded at the point least similar to its centroid.
inline KMeansResult kmeans(const Matrix& features, std::size_t k, std::size_t iters,
                           std::size_t redos, Rng& rng) {
  require(k >= 1 && k <= features.rows(), "kmeans: need 1 <= k <= number of points");
  require(redos >= 1, "kmeans: redos must be >= 1");
  const Matrix x = normalize_rows(features);
  const std::size_t m = x.rows();

  KMeansResult best;
  for (std::size_t redo = 0; redo < redos; ++redo) {
    Rng redo_rng = rng.fork();
    Matrix centroids = detail::kmeans_plus_plus(x, k, redo_rng);
    std::vector<int> assign(m, -1);
    std::vector<double> sim(m, 0.0);
    std::vector<double> trace;
    double objective = detail::assign_points(x, centroids, assign, sim);
    trace.push_back(objective);

    for (std::size_t it = 0; it < iters; ++it) {
      Matrix sums(k, x.cols());
      std::vector<std::size_t> counts(k, 0);
      for (std::size_t i = 0; i < m; ++i) {
        const auto c = static_cast<std::size_t>(assign[i]);
        ++counts[c];
        auto row = sums.row(c);
        auto xi = x.row(i);
        for (std::size_t f = 0; f < row.size(); ++f) row[f] += xi[f];
      }
      std::vector<bool> taken(m, false);
      for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] > 0 && norm2(sums.row(c)) > 0.0) {
          auto row = sums.row(c);
          const double n = norm2(row);
          std::transform(row.begin(), row.end(), centroids.row(c).begin(),
                         [n](double v) { return v / n; });
          continue;
        }
        std::size_t far = m;
        for (std::size_t i = 0; i < m; ++i)
          if (!taken[i] && (far == m || sim[i] < sim[far])) far = i;
        taken[far] = true;
        std::copy(x.row(far).begin(), x.row(far).end(), centroids.row(c).begin());
      }
      const std::vector<int> previous = assign;
      objective = detail::assign_points(x, centroids, assign, sim);
      trace.push_back(objective);
      if (assign == previous) break;
    }

    if (objective > best.objective) {
      best.objective = objective;
      best.assignments = assign;
      best.centroids = centroids;
      best.best_redo = redo;
    }
    best.objective_trace.push_back(std::move(trace));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Partition-agreement scores from the contingency table.

struct ClusterMetrics {
  double nmi = 0.0;
  double ami = 0.0;
  double ari = 0.0;
};

struct Contingency {
  std::vector<std::vector<long long>> table;  // [pred cluster][true class]
  std::vector<long long> pred_sizes;
  std::vector<long long> true_sizes;
  long long n = 0;
};

inline Contingency contingency(std::span<const int> pred, std::span<const int> truth) {
  require(pred.size() == truth.size(), "contingency: length mismatch");
  require(!pred.empty(), "contingency: empty labelings");
  std::map<int, std::size_t> pred_ids, true_ids;
  for (int p : pred) pred_ids.emplace(p, pred_ids.size());
  for (int t : truth) true_ids.emplace(t, true_ids.size());
  Contingency c;
  c.n = static_cast<long long>(pred.size());
  c.table.assign(pred_ids.size(), std::vector<long long>(true_ids.size(), 0));
  c.pred_sizes.assign(pred_ids.size(), 0);
  c.true_sizes.assign(true_ids.size(), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto a = pred_ids[pred[i]];
    const auto b = true_ids[truth[i]];
    ++c.table[a][b];
    ++c.pred_sizes[a];
    ++c.true_sizes[b];
  }
  return c;
}

namespace detail {

inline double label_entropy(const std::vector<long long>& sizes, long long n) {
  double h = 0.0;
  for (long long s : sizes)
    if (s > 0) {
      const double p = static_cast<double>(s) / static_cast<double>(n);
      h -= p * std::log(p);
    }
  return h;
}

inline double mutual_information(const Contingency& c) {
  const double n = static_cast<double>(c.n);
  double mi = 0.0;
  for (std::size_t a = 0; a < c.table.size(); ++a)
    for (std::size_t b = 0; b < c.table[a].size(); ++b) {
      const long long nij = c.table[a][b];
      if (nij == 0) continue;
      const double v = static_cast<double>(nij);
      mi += v / n *
            std::log(n * v / (static_cast<double>(c.pred_sizes[a]) *
                              static_cast<double>(c.true_sizes[b])));
    }
  return std::max(mi, 0.0);
}

/// Expected MI under the permutation (hypergeometric) model, factorial form.
inline double expected_mutual_information(const Contingency& c) {
  const long long n = c.n;
  const double nd = static_cast<double>(n);
  auto lfact = [](long long v) { return std::lgamma(static_cast<double>(v) + 1.0); };
  double emi = 0.0;
  for (long long a : c.pred_sizes)
    for (long long b : c.true_sizes) {
      const long long lo = std::max(1LL, a + b - n);
      const long long hi = std::min(a, b);
      for (long long nij = lo; nij <= hi; ++nij) {
        const double v = static_cast<double>(nij);
        const double term = v / nd *
                            std::log(nd * v / (static_cast<double>(a) * static_cast<double>(b)));
        const double log_p = lfact(a) + lfact(b) + lfact(n - a) + lfact(n - b) - lfact(n) -
                             lfact(nij) - lfact(a - nij) - lfact(b - nij) -
                             lfact(n - a - b + nij);
        emi += term * std::exp(log_p);
      }
    }
  return emi;
}

inline double choose2(long long v) { return static_cast<double>(v) * (v - 1) / 2.0; }

}  // namespace detail

/// NMI and AMI normalize by the arithmetic mean of the two label entropies.
inline ClusterMetrics cluster_metrics(std::span<const int> pred, std::span<const int> truth) {
  const Contingency c = contingency(pred, truth);
  const double h_pred = detail::label_entropy(c.pred_sizes, c.n);
  const double h_true = detail::label_entropy(c.true_sizes, c.n);
  const double mi = detail::mutual_information(c);
  const double mean_h = 0.5 * (h_pred + h_true);

  ClusterMetrics out;
  // Both labelings a single cluster: identical partitions.
  if (h_pred == 0.0 && h_true == 0.0) {
    out.nmi = 1.0;
  } else {
    out.nmi = std::clamp(mi / mean_h, 0.0, 1.0);
  }

  const auto k_pred = c.pred_sizes.size();
  const auto k_true = c.true_sizes.size();
  const bool trivial = (k_pred == k_true) &&
                       (k_pred == 1 || k_pred == static_cast<std::size_t>(c.n));
  if (trivial) {
    out.ami = 1.0;
  } else {
    const double emi = detail::expected_mutual_information(c);
    double denom = mean_h - emi;
    // Guard the vanishing denominator without flipping its sign.
    const double tiny = std::numeric_limits<double>::epsilon();
    if (std::abs(denom) < tiny) denom = denom < 0.0 ? -tiny : tiny;
    out.ami = (mi - emi) / denom;
  }

  double index = 0.0, sum_pred = 0.0, sum_true = 0.0;
  for (const auto& row : c.table)
    for (long long v : row) index += detail::choose2(v);
  for (long long s : c.pred_sizes) sum_pred += detail::choose2(s);
  for (long long s : c.true_sizes) sum_true += detail::choose2(s);
  const double pairs = detail::choose2(c.n);
  const double expected = pairs > 0.0 ? sum_pred * sum_true / pairs : 0.0;
  const double max_index = 0.5 * (sum_pred + sum_true);
  out.ari = (max_index == expected) ? 1.0 : (index - expected) / (max_index - expected);
  return out;
}

}  // namespace carp
