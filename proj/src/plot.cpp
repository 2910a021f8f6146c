#include "sfg/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

namespace sfg {

namespace {

constexpr double kPanel = 340.0;
constexpr double kMargin = 42.0;
constexpr double kTitle = 24.0;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"};

const char* class_color(int label) {
    if (label < 0) return "#7f7f7f";
    return kPalette[label % 8];
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

struct Box {
    double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;

    void include(double x, double y) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
    }
};

Box empty_box() {
    const double inf = std::numeric_limits<double>::infinity();
    return {inf, -inf, inf, -inf};
}

Box finish(Box b, double pad_frac) {
    if (!(b.x0 <= b.x1)) b = Box{};
    if (!(b.y0 <= b.y1)) {
        b.y0 = 0.0;
        b.y1 = 1.0;
    }
    if (b.x1 - b.x0 <= 0.0) {
        b.x0 -= 0.5;
        b.x1 += 0.5;
    }
    if (b.y1 - b.y0 <= 0.0) {
        b.y0 -= 0.5;
        b.y1 += 0.5;
    }
    const double px = (b.x1 - b.x0) * pad_frac, py = (b.y1 - b.y0) * pad_frac;
    return {b.x0 - px, b.x1 + px, b.y0 - py, b.y1 + py};
}

Box equal_aspect(Box b) {
    const double w = b.x1 - b.x0, h = b.y1 - b.y0;
    if (w > h) {
        const double c = 0.5 * (b.y0 + b.y1);
        b.y0 = c - 0.5 * w;
        b.y1 = c + 0.5 * w;
    } else {
        const double c = 0.5 * (b.x0 + b.x1);
        b.x0 = c - 0.5 * h;
        b.x1 = c + 0.5 * h;
    }
    return b;
}

class Frame {
public:
    Frame(double left, double top, double width, double height, Box box)
        : left_(left), top_(top), width_(width), height_(height), box_(box) {}

    double px(double x) const { return left_ + (x - box_.x0) / (box_.x1 - box_.x0) * width_; }
    double py(double y) const { return top_ + height_ - (y - box_.y0) / (box_.y1 - box_.y0) * height_; }
    double scale() const { return width_ / (box_.x1 - box_.x0); }

    void axes(std::ostringstream& os, const std::string& title) const {
        os << "<rect x=\"" << num(left_) << "\" y=\"" << num(top_) << "\" width=\"" << num(width_) << "\" height=\""
           << num(height_) << "\" fill=\"none\" stroke=\"#333\" stroke-width=\"1\"/>\n";
        for (int i = 0; i <= 4; ++i) {
            const double fx = box_.x0 + (box_.x1 - box_.x0) * i / 4.0;
            const double fy = box_.y0 + (box_.y1 - box_.y0) * i / 4.0;
            const double tx = px(fx), ty = py(fy);
            os << "<line x1=\"" << num(tx) << "\" y1=\"" << num(top_ + height_) << "\" x2=\"" << num(tx) << "\" y2=\""
               << num(top_ + height_ + 4) << "\" stroke=\"#333\"/>\n";
            os << "<text x=\"" << num(tx) << "\" y=\"" << num(top_ + height_ + 16)
               << "\" font-size=\"10\" text-anchor=\"middle\">" << tick(fx) << "</text>\n";
            os << "<line x1=\"" << num(left_ - 4) << "\" y1=\"" << num(ty) << "\" x2=\"" << num(left_) << "\" y2=\""
               << num(ty) << "\" stroke=\"#333\"/>\n";
            os << "<text x=\"" << num(left_ - 6) << "\" y=\"" << num(ty + 3)
               << "\" font-size=\"10\" text-anchor=\"end\">" << tick(fy) << "</text>\n";
        }
        os << "<text x=\"" << num(left_ + width_ / 2) << "\" y=\"" << num(top_ - 8)
           << "\" font-size=\"13\" text-anchor=\"middle\">" << escape(title) << "</text>\n";
    }

    void clip(std::ostringstream& os, const std::string& id) const {
        os << "<clipPath id=\"" << id << "\"><rect x=\"" << num(left_) << "\" y=\"" << num(top_) << "\" width=\""
           << num(width_) << "\" height=\"" << num(height_) << "\"/></clipPath>\n";
    }

private:
    double left_, top_, width_, height_;
    Box box_;
};

std::string header(double width, double height) {
    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
       << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
       << "\" viewBox=\"0 0 " << num(width) << ' ' << num(height) << "\" font-family=\"sans-serif\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    return os.str();
}

void line(std::ostringstream& os, double x1, double y1, double x2, double y2, const char* color, double width,
          bool arrow = false) {
    os << "<line x1=\"" << num(x1) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(x2) << "\" y2=\"" << num(y2)
       << "\" stroke=\"" << color << "\" stroke-width=\"" << num(width) << '"';
    if (arrow) {
        // Two short barbs at the head.
        const double dx = x2 - x1, dy = y2 - y1, len = std::hypot(dx, dy);
        os << "/>\n";
        if (len < 1e-9) return;
        const double ux = dx / len, uy = dy / len, barb = std::min(4.0, 0.4 * len);
        const double bx1 = x2 - barb * (ux * 0.866 - uy * 0.5), by1 = y2 - barb * (uy * 0.866 + ux * 0.5);
        const double bx2 = x2 - barb * (ux * 0.866 + uy * 0.5), by2 = y2 - barb * (uy * 0.866 - ux * 0.5);
        os << "<polyline points=\"" << num(bx1) << ',' << num(by1) << ' ' << num(x2) << ',' << num(y2) << ' '
           << num(bx2) << ',' << num(by2) << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\""
           << num(width) << "\"/>\n";
        return;
    }
    os << "/>\n";
}

} // namespace

std::string scatter_svg(const std::vector<ScatterPanel>& panels) {
    for (const auto& p : panels)
        if (p.points.size() > 0 && p.points.dim() != 2)
            throw std::invalid_argument("scatter plots need 2-D points (got " + std::to_string(p.points.dim()) +
                                        "); project the samples to two coordinates first");
    const std::size_t n = std::max<std::size_t>(panels.size(), 1);
    std::ostringstream os;
    os << header(n * kPanel, kPanel + kTitle);
    for (std::size_t k = 0; k < panels.size(); ++k) {
        const auto& p = panels[k];
        Box b = empty_box();
        for (const auto& s : p.underlay) {
            b.include(s.a.x(), s.a.y());
            b.include(s.b.x(), s.b.y());
        }
        for (int i = 0; i < p.points.size(); ++i) b.include(p.points.points(i, 0), p.points.points(i, 1));
        const Frame f(k * kPanel + kMargin, kTitle + 10, kPanel - kMargin - 10, kPanel - kMargin - 10,
                      equal_aspect(finish(b, 0.05)));
        const std::string clip_id = "c" + std::to_string(k);
        f.clip(os, clip_id);
        f.axes(os, p.title);
        os << "<g clip-path=\"url(#" << clip_id << ")\">\n";
        for (const auto& s : p.underlay) line(os, f.px(s.a.x()), f.py(s.a.y()), f.px(s.b.x()), f.py(s.b.y()), "#cccccc", 1.0);
        for (int i = 0; i < p.points.size(); ++i) {
            const int label = p.points.labels.empty() ? kNullClass : p.points.labels[i];
            os << "<circle cx=\"" << num(f.px(p.points.points(i, 0))) << "\" cy=\"" << num(f.py(p.points.points(i, 1)))
               << "\" r=\"1.3\" fill=\"" << class_color(label) << "\" fill-opacity=\"0.6\"/>\n";
        }
        os << "</g>\n";
    }
    if (panels.empty()) {
        const Frame f(kMargin, kTitle + 10, kPanel - kMargin - 10, kPanel - kMargin - 10, Box{});
        f.axes(os, "");
    }
    os << "</svg>\n";
    return os.str();
}

std::string quiver_svg(const std::vector<QuiverPanel>& panels) {
    for (const auto& p : panels)
        for (const auto& fp : p.field)
            if (fp.x.size() != 2) throw std::invalid_argument("quiver plots need a 2-D field; project first");
    const std::size_t n = std::max<std::size_t>(panels.size(), 1);
    std::ostringstream os;
    os << header(n * kPanel, kPanel + kTitle + 16);
    for (std::size_t k = 0; k < panels.size(); ++k) {
        const auto& p = panels[k];
        Box b = empty_box();
        std::set<double> xs;
        for (const auto& fp : p.field) {
            b.include(fp.x(0), fp.x(1));
            xs.insert(fp.x(0));
        }
        const Box box = equal_aspect(finish(b, 0.06));
        const Frame f(k * kPanel + kMargin, kTitle + 10, kPanel - kMargin - 10, kPanel - kMargin - 10, box);
        const double cell_px =
            xs.size() > 1 ? (*xs.rbegin() - *xs.begin()) / static_cast<double>(xs.size() - 1) * f.scale() : 20.0;

        double max_s = 0.0, max_g = 0.0;
        for (const auto& fp : p.field) {
            max_s = std::max(max_s, fp.score.norm());
            for (const auto& g : fp.class_grads) max_g = std::max(max_g, g.norm());
        }
        const double ks = max_s > 0.0 ? 0.9 * cell_px / max_s : 0.0;
        const double kg = max_g > 0.0 ? 0.9 * cell_px / max_g : 0.0;
        const std::string clip_id = "q" + std::to_string(k);
        f.clip(os, clip_id);
        f.axes(os, p.title);
        os << "<g clip-path=\"url(#" << clip_id << ")\">\n";
        for (const auto& fp : p.field) {
            const double x = f.px(fp.x(0)), y = f.py(fp.x(1));
            line(os, x, y, x + ks * fp.score(0), y - ks * fp.score(1), "#222222", 0.8, true);
            for (std::size_t c = 0; c < fp.class_grads.size(); ++c) {
                const auto& g = fp.class_grads[c];
                line(os, x, y, x + kg * g(0), y - kg * g(1), kPalette[(c + 2) % 8], 0.6, true);
            }
            if (fp.gate) {
                const double half = 0.45 * cell_px;
                line(os, x - half * fp.eigvec(0), y + half * fp.eigvec(1), x + half * fp.eigvec(0),
                     y - half * fp.eigvec(1), "#d62728", 1.6);
            }
        }
        os << "</g>\n";
        const double ly = kTitle + kPanel - 6;
        const double lx = k * kPanel + kMargin;
        os << "<text x=\"" << num(lx) << "\" y=\"" << num(ly)
           << "\" font-size=\"10\"><tspan fill=\"#222222\">score</tspan>  <tspan fill=\"" << kPalette[2]
           << "\">class gradients</tspan>  <tspan fill=\"#d62728\">positive curvature</tspan></text>\n";
    }
    if (panels.empty()) {
        const Frame f(kMargin, kTitle + 10, kPanel - kMargin - 10, kPanel - kMargin - 10, Box{});
        f.axes(os, "");
    }
    os << "</svg>\n";
    return os.str();
}

std::string line_chart_svg(const std::vector<SweepPoint>& points, const std::string& metric, const std::string& title) {
    std::map<std::string, std::vector<std::pair<double, double>>> curves;
    std::vector<std::string> order;
    std::optional<double> baseline;
    Box b = empty_box();
    for (const auto& p : points) {
        const auto it = p.metrics.find(metric);
        if (it == p.metrics.end() || !std::isfinite(it->second)) continue;
        if (p.curve == "baseline") {
            baseline = it->second;
            b.include(p.weight, it->second);
            continue;
        }
        if (!curves.count(p.curve)) order.push_back(p.curve);
        curves[p.curve].emplace_back(p.weight, it->second);
        b.include(p.weight, it->second);
    }
    const double width = 520, height = 360;
    std::ostringstream os;
    os << header(width, height);
    const Frame f(60, kTitle + 16, width - 200, height - 90, finish(b, 0.05));
    f.axes(os, title);
    os << "<text x=\"" << num(60 + (width - 200) / 2) << "\" y=\"" << num(height - 12)
       << "\" font-size=\"11\" text-anchor=\"middle\">weight</text>\n";
    os << "<text x=\"14\" y=\"" << num(kTitle + 16 + (height - 90) / 2) << "\" font-size=\"11\" text-anchor=\"middle\""
       << " transform=\"rotate(-90 14 " << num(kTitle + 16 + (height - 90) / 2) << ")\">" << escape(metric)
       << "</text>\n";
    if (baseline) {
        const double y = f.py(*baseline);
        os << "<line x1=\"" << num(f.px(b.x0 <= b.x1 ? b.x0 : 0.0)) << "\" y1=\"" << num(y) << "\" x2=\""
           << num(f.px(b.x0 <= b.x1 ? b.x1 : 1.0)) << "\" y2=\"" << num(y)
           << "\" stroke=\"#555\" stroke-dasharray=\"5,4\"/>\n";
    }
    for (std::size_t k = 0; k < order.size(); ++k) {
        auto pts = curves[order[k]];
        std::stable_sort(pts.begin(), pts.end(), [](auto& a, auto& c) { return a.first < c.first; });
        os << "<polyline fill=\"none\" stroke=\"" << kPalette[k % 8] << "\" stroke-width=\"1.8\" points=\"";
        for (std::size_t i = 0; i < pts.size(); ++i)
            os << (i ? " " : "") << num(f.px(pts[i].first)) << ',' << num(f.py(pts[i].second));
        os << "\"/>\n";
        for (const auto& [x, y] : pts)
            os << "<circle cx=\"" << num(f.px(x)) << "\" cy=\"" << num(f.py(y)) << "\" r=\"2.5\" fill=\""
               << kPalette[k % 8] << "\"/>\n";
        os << "<text x=\"" << num(width - 130) << "\" y=\"" << num(kTitle + 30 + 16 * k) << "\" font-size=\"11\" fill=\""
           << kPalette[k % 8] << "\">" << escape(order[k]) << "</text>\n";
    }
    if (baseline)
        os << "<text x=\"" << num(width - 130) << "\" y=\"" << num(kTitle + 30 + 16 * order.size())
           << "\" font-size=\"11\" fill=\"#555\">baseline (dashed)</text>\n";
    os << "</svg>\n";
    return os.str();
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << content;
}

} // namespace sfg
