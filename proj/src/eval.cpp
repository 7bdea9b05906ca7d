#include "pmjdot/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

namespace pmjdot {

std::vector<Index> rank_gallery(const Vector& query, const Matrix& gallery) {
  if (gallery.cols() == 0) throw std::invalid_argument("rank_gallery: empty gallery");
  if (gallery.rows() != query.size()) throw std::invalid_argument("rank_gallery: dimension mismatch");
  const Vector dist = (1.0 - (gallery.transpose() * query).array()).matrix();
  std::vector<Index> order(static_cast<std::size_t>(gallery.cols()));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return dist(a) < dist(b); });
  return order;
}

double average_precision(const std::vector<bool>& relevant, Index relevant_total) {
  if (relevant_total <= 0) return 0.0;
  double sum = 0;
  Index hits = 0;
  for (std::size_t i = 0; i < relevant.size(); ++i)
    if (relevant[i]) sum += double(++hits) / double(i + 1);
  return sum / double(relevant_total);
}

double average_precision_at_k(const std::vector<bool>& relevant, Index k) {
  double sum = 0;
  Index hits = 0;
  const std::size_t limit = std::min(relevant.size(), static_cast<std::size_t>(std::max<Index>(k, 0)));
  for (std::size_t i = 0; i < limit; ++i)
    if (relevant[i]) sum += double(++hits) / double(i + 1);
  return hits == 0 ? 0.0 : sum / double(hits);
}

RetrievalReport evaluate(const Matrix& queries, const std::vector<int>& query_labels, const Matrix& gallery,
                         const std::vector<int>& gallery_labels, int k) {
  if (static_cast<Index>(query_labels.size()) != queries.cols() ||
      static_cast<Index>(gallery_labels.size()) != gallery.cols())
    throw std::invalid_argument("evaluate: every query and gallery item needs a label");
  if (queries.cols() == 0) throw std::invalid_argument("evaluate: no queries");
  if (k < 1 || k > gallery.cols()) throw std::invalid_argument("evaluate: k must be in [1, gallery size]");

  RetrievalReport report;
  report.k = k;
  report.queries.reserve(static_cast<std::size_t>(queries.cols()));
  for (Index q = 0; q < queries.cols(); ++q) {
    QueryResult r;
    r.query = q;
    r.label = query_labels[q];
    const std::vector<Index> order = rank_gallery(queries.col(q), gallery);
    std::vector<bool> relevant(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) relevant[i] = gallery_labels[order[i]] == r.label;
    r.relevant_total = static_cast<Index>(std::count(relevant.begin(), relevant.end(), true));
    r.flagged = r.relevant_total == 0;
    const Index hits_at_k = std::count(relevant.begin(), relevant.begin() + k, true);
    r.prec_at_k = double(hits_at_k) / double(k);
    r.ap_at_k = average_precision_at_k(relevant, k);
    r.ap = average_precision(relevant, r.relevant_total);
    r.top_k.assign(order.begin(), order.begin() + k);
    report.prec_at_k += r.prec_at_k;
    report.map_at_k += r.ap_at_k;
    report.map += r.ap;
    report.queries.push_back(std::move(r));
  }
  const double n = double(queries.cols());
  report.prec_at_k /= n;
  report.map_at_k /= n;
  report.map /= n;
  return report;
}

nlohmann::json to_json(const RetrievalReport& report) {
  nlohmann::json per_query = nlohmann::json::array();
  for (const auto& q : report.queries) {
    per_query.push_back({{"query", q.query},
                         {"label", q.label},
                         {"relevant_total", q.relevant_total},
                         {"prec_at_k", q.prec_at_k},
                         {"ap_at_k", q.ap_at_k},
                         {"ap", q.ap},
                         {"flagged", q.flagged},
                         {"top_k", q.top_k}});
  }
  return {{"k", report.k},
          {"prec_at_k", report.prec_at_k},
          {"map_at_k", report.map_at_k},
          {"map", report.map},
          {"queries", std::move(per_query)}};
}

std::string csv_summary(const RetrievalReport& report) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f", report.prec_at_k, report.map_at_k, report.map);
  return buf;
}

}  // namespace pmjdot
