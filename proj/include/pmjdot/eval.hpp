// Cross-domain retrieval evaluation: cosine ranking, Prec@k, mAP@k, mAP.
#pragma once

#include "pmjdot/types.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace pmjdot {

/// Gallery indices by non-decreasing cosine distance to `query`; ties go to
/// the lower gallery index. Gallery is D x N with unit columns.
std::vector<Index> rank_gallery(const Vector& query, const Matrix& gallery);

/// Full-list average precision: mean precision at each relevant rank,
/// divided by the total number of relevant items.
double average_precision(const std::vector<bool>& relevant_in_rank_order, Index relevant_total);

/// AP truncated at k, normalized by the number of relevant items found in
/// the top k (0 when none are found).
double average_precision_at_k(const std::vector<bool>& relevant_in_rank_order, Index k);

struct QueryResult {
  Index query = 0;
  int label = 0;
  Index relevant_total = 0;
  double prec_at_k = 0;
  double ap_at_k = 0;
  double ap = 0;
  // Set when the query's class is absent from the gallery (AP defined as 0).
  bool flagged = false;
  std::vector<Index> top_k;
};

struct RetrievalReport {
  int k = 0;
  double prec_at_k = 0;
  double map_at_k = 0;
  double map = 0;
  std::vector<QueryResult> queries;
};

RetrievalReport evaluate(const Matrix& queries, const std::vector<int>& query_labels, const Matrix& gallery,
                         const std::vector<int>& gallery_labels, int k);

nlohmann::json to_json(const RetrievalReport& report);
/// `prec_at_k,map_at_k,map` for tables.
std::string csv_summary(const RetrievalReport& report);

}  // namespace pmjdot
