// Landmark correspondence between a template feature map and a query feature
// map. The bidirectional strategy takes the top-k forward candidates, matches
// each back onto the template map, and keeps the candidate whose back-match
// lands closest to the true template landmark — a verification step that
// rescues forward argmax mistakes caused by repeated or ambiguous patterns.
//
// All tie-breaks are deterministic: candidate ranking is by descending
// similarity then row-major position; pair selection is by distance, then
// higher forward similarity, then row-major on the query point.

#pragma once

#include "fmosd/core.hpp"
#include "fmosd/simloss.hpp"

#include <algorithm>
#include <utility>
#include <vector>

namespace fmosd {

struct MatchConfig {
  int k = 3;

  void validate() const {
    if (k < 1) throw Error("invalid-match-config", "k must be >= 1");
  }
};

struct MatchResult {
  GridPoint query_point;     // selected prediction on the query grid
  GridPoint template_point;  // its back-match on the template grid
  std::vector<GridPoint> candidates;                   // forward top-k, ranked
  std::vector<std::pair<GridPoint, GridPoint>> pairs;  // (candidate, back-match)
  double inverse_error = 0.0;     // grid-unit distance template_point -> true landmark
  double forward_similarity = 0.0;
};

inline GridPoint argmax_match(const FeatureMap& f_q, const VectorXd& anchor) {
  SimilarityMap s = cosine_similarity_map(f_q, anchor);
  GridPoint best{0, 0};
  double best_v = s.values(0, 0);
  for (int r = 0; r < s.h; ++r)
    for (int c = 0; c < s.w; ++c)
      if (s.values(r, c) > best_v) {
        best_v = s.values(r, c);
        best = GridPoint{c, r};
      }
  return best;
}

inline std::vector<GridPoint> top_k_candidates(const SimilarityMap& s, int k) {
  const int cells = s.h * s.w;
  if (k < 1) throw Error("invalid-match-config", "k must be >= 1");
  if (k > cells)
    throw Error("k-too-large", "k=" + std::to_string(k) + " exceeds " +
                                   std::to_string(cells) + " grid cells");
  struct Entry {
    double v;
    int idx;  // row-major cell index
  };
  std::vector<Entry> entries(static_cast<size_t>(cells));
  for (int r = 0; r < s.h; ++r)
    for (int c = 0; c < s.w; ++c)
      entries[static_cast<size_t>(r) * s.w + c] = {s.values(r, c), r * s.w + c};
  auto better = [](const Entry& a, const Entry& b) {
    return a.v > b.v || (a.v == b.v && a.idx < b.idx);
  };
  std::partial_sort(entries.begin(), entries.begin() + k, entries.end(), better);
  std::vector<GridPoint> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i)
    out.push_back(GridPoint{entries[static_cast<size_t>(i)].idx % s.w,
                            entries[static_cast<size_t>(i)].idx / s.w});
  return out;
}

inline GridPoint inverse_match(const FeatureMap& f_t, const VectorXd& query_feature) {
  return argmax_match(f_t, query_feature);
}

inline MatchResult bdm_match(const FeatureMap& f_t, const FeatureMap& f_q, GridPoint p_t,
                             const MatchConfig& cfg) {
  cfg.validate();
  if (f_t.dim != f_q.dim)
    throw Error("tensor-shape-mismatch", "template/query channel dims differ");
  if (!f_t.contains(p_t))
    throw Error("center-out-of-bounds", "template landmark outside template grid");

  SimilarityMap fwd = cosine_similarity_map(f_q, f_t.descriptor(p_t.y, p_t.x));
  MatchResult res;
  res.candidates = top_k_candidates(fwd, cfg.k);
  res.pairs.reserve(res.candidates.size());
  int best = -1;
  double best_dist = 0.0;
  for (size_t i = 0; i < res.candidates.size(); ++i) {
    const GridPoint cq = res.candidates[i];
    const GridPoint ct = inverse_match(f_t, f_q.descriptor(cq.y, cq.x));
    res.pairs.emplace_back(cq, ct);
    const double d = euclidean_dist(ct, p_t);
    // Candidates arrive ranked by (similarity desc, row-major), which is
    // exactly the tie order among equal distances — strict < suffices.
    if (best < 0 || d < best_dist) {
      best = static_cast<int>(i);
      best_dist = d;
    }
  }
  res.query_point = res.pairs[static_cast<size_t>(best)].first;
  res.template_point = res.pairs[static_cast<size_t>(best)].second;
  res.inverse_error = best_dist;
  res.forward_similarity = fwd.values(res.query_point.y, res.query_point.x);
  return res;
}

}  // namespace fmosd
