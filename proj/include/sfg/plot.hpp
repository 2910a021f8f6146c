#pragma once

#include <string>
#include <vector>

#include "sfg/datasets.hpp"
#include "sfg/eval.hpp"

namespace sfg {

struct ScatterPanel {
    std::string title;
    LabeledPointSet points;         // must be 2-D (or empty)
    std::vector<Segment> underlay;  // drawn faintly beneath the points
};

/// Side-by-side scatter panels with class colors. Throws std::invalid_argument
/// for point sets that are not 2-D.
std::string scatter_svg(const std::vector<ScatterPanel>& panels);

struct QuiverPanel {
    std::string title;
    std::vector<FieldPoint> field;
};

/// Score arrows (dark), classifier-gradient arrows (class colors) and
/// top-eigenvector segments where the curvature is positive (red).
std::string quiver_svg(const std::vector<QuiverPanel>& panels);

/// One line per curve of `metric` against weight; the baseline row is a dashed level.
std::string line_chart_svg(const std::vector<SweepPoint>& points, const std::string& metric, const std::string& title);

void write_text(const std::string& path, const std::string& content);

} // namespace sfg
