#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "primed/tensor.hpp"

// Region/boundary metrics and the null-split S score. Masks are H x W or
// T x H x W binary tensors.
namespace primed::evalkit {

using json = nlohmann::json;

double jaccard(const Tensor& pred, const Tensor& gt);

// 4-neighbour boundary pixels; pixels outside the image count as background.
Tensor boundary(const Tensor& mask);

// Boundary F-measure with disk dilation of radius tolerance_px.
double boundary_f(const Tensor& pred, const Tensor& gt, double tolerance_px = 1.0);

struct SScore {
  double value = 0;
  bool capped = false;  // some frame had no background pixel
};
// sqrt(fg / bg) per frame (T x H x W), averaged over frames.
SScore s_metric(const Tensor& pred);

// Per-frame metrics averaged over frames.
double video_jaccard(const Tensor& pred, const Tensor& gt);
double video_boundary_f(const Tensor& pred, const Tensor& gt, double tolerance_px = 1.0);

struct SampleMetrics {
  std::string id;
  std::string split;
  double J = 0, F = 0, S = 0;  // J, F in [0, 1]
  bool s_capped = false;
};

struct MetricReport {
  std::string split;
  double J = 0, F = 0, JF = 0;  // percentages
  std::optional<double> S;      // null split only
  bool degenerate = false;      // J/F over empty ground truth
  std::vector<SampleMetrics> per_sample;
};

// Mean over samples; JF from the aggregated J and F.
MetricReport aggregate(const std::string& split, const std::vector<SampleMetrics>& samples);

// Mean of the seen and unseen means.
MetricReport mix(const MetricReport& seen, const MetricReport& unseen);

// Groups samples by split tag; "mix" is added when both seen and unseen exist.
std::map<std::string, MetricReport> aggregate_by_split(const std::vector<SampleMetrics>& samples,
                                                       const std::vector<std::string>& known_splits);

json to_json(const MetricReport& r);
MetricReport report_from_json(const json& j);

}  // namespace primed::evalkit
