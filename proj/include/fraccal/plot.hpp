#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace fraccal::svg {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    std::string color = "#1f77b4";
    bool markers = false;
    bool dashed = false;
};

struct LinePlot {
    std::string title;
    std::string xlabel;
    std::string ylabel;
    bool logx = false;
    bool logy = false;
    std::vector<Series> series;
};

/// Filled polygons colored by value (viridis-like ramp).
struct PatchPlot {
    std::string title;
    std::vector<std::vector<std::array<double, 2>>> polygons;
    std::vector<double> values;
};

inline const std::vector<std::string>& palette() {
    static const std::vector<std::string> p = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return p;
}

namespace detail {

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string ramp(double t) {
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0);
    // piecewise-linear through five anchor colors
    static const double anchors[5][3] = {
        {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
    const double u = t * 4.0;
    const int k = std::min(3, static_cast<int>(u));
    const double f = u - k;
    char buf[16];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x",
                  static_cast<int>(anchors[k][0] + f * (anchors[k + 1][0] - anchors[k][0])),
                  static_cast<int>(anchors[k][1] + f * (anchors[k + 1][1] - anchors[k][1])),
                  static_cast<int>(anchors[k][2] + f * (anchors[k + 1][2] - anchors[k][2])));
    return buf;
}

inline std::vector<double> ticks(double lo, double hi, bool logscale) {
    std::vector<double> t;
    if (logscale) {
        for (double e = std::floor(lo); e <= std::ceil(hi) + 1e-9; e += 1.0) {
            if (e >= lo - 1e-9 && e <= hi + 1e-9) {
                t.push_back(e);
            }
        }
        if (t.size() < 2) {
            t = {lo, hi};
        }
        return t;
    }
    const double span = hi - lo;
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (m * mag >= raw) {
            step = m * mag;
            break;
        }
    }
    for (double v = std::ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) {
        t.push_back(std::abs(v) < 1e-12 * span ? 0.0 : v);
    }
    return t;
}

inline void open_or_throw(std::ofstream& os, const std::filesystem::path& path) {
    os.open(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
}

}  // namespace detail

inline void write_line_plot(const std::filesystem::path& path, const LinePlot& plot) {
    constexpr double W = 640, H = 440, left = 80, right = 170, top = 40, bottom = 60;
    auto tx = [&](double v) { return plot.logx ? std::log10(v) : v; };
    auto ty = [&](double v) { return plot.logy ? std::log10(v) : v; };
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : plot.series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const double a = tx(s.x[i]), b = ty(s.y[i]);
            if (std::isfinite(a) && std::isfinite(b)) {
                x0 = std::min(x0, a);
                x1 = std::max(x1, a);
                y0 = std::min(y0, b);
                y1 = std::max(y1, b);
            }
        }
    }
    if (!std::isfinite(x0)) {
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (x1 - x0 < 1e-300) {
        x0 -= 0.5, x1 += 0.5;
    }
    if (y1 - y0 < 1e-300) {
        y0 -= 0.5, y1 += 0.5;
    }
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    const double pw = W - left - right, ph = H - top - bottom;
    auto px = [&](double a) { return left + (a - x0) / (x1 - x0) * pw; };
    auto py = [&](double b) { return top + (1.0 - (b - y0) / (y1 - y0)) * ph; };

    std::ofstream os;
    detail::open_or_throw(os, path);
    using detail::fmt;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
       << detail::escape(plot.title) << "</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (double t : detail::ticks(x0, x1, plot.logx)) {
        const std::string label = plot.logx ? "1e" + fmt(t) : fmt(t);
        os << "<line x1=\"" << fmt(px(t)) << "\" x2=\"" << fmt(px(t)) << "\" y1=\"" << top + ph << "\" y2=\""
           << top + ph + 5 << "\" stroke=\"black\"/><text x=\"" << fmt(px(t)) << "\" y=\"" << top + ph + 18
           << "\" text-anchor=\"middle\">" << label << "</text>\n";
    }
    for (double t : detail::ticks(y0, y1, plot.logy)) {
        const std::string label = plot.logy ? "1e" + fmt(t) : fmt(t);
        os << "<line x1=\"" << left - 5 << "\" x2=\"" << left << "\" y1=\"" << fmt(py(t)) << "\" y2=\""
           << fmt(py(t)) << "\" stroke=\"black\"/><text x=\"" << left - 8 << "\" y=\"" << fmt(py(t) + 4)
           << "\" text-anchor=\"end\">" << label << "</text>\n";
    }
    os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">"
       << detail::escape(plot.xlabel) << "</text>\n";
    os << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
       << detail::escape(plot.ylabel) << "</text>\n";
    int row = 0;
    for (const auto& s : plot.series) {
        std::string pts;
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const double a = tx(s.x[i]), b = ty(s.y[i]);
            if (std::isfinite(a) && std::isfinite(b)) {
                pts += fmt(px(a)) + "," + fmt(py(b)) + " ";
            }
        }
        os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\""
           << (s.dashed ? " stroke-dasharray=\"6,4\"" : "") << " points=\"" << pts << "\"/>\n";
        if (s.markers) {
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                const double a = tx(s.x[i]), b = ty(s.y[i]);
                if (std::isfinite(a) && std::isfinite(b)) {
                    os << "<circle cx=\"" << fmt(px(a)) << "\" cy=\"" << fmt(py(b)) << "\" r=\"3\" fill=\""
                       << s.color << "\"/>\n";
                }
            }
        }
        const double ly = top + 10 + 18 * row++;
        os << "<line x1=\"" << W - right + 10 << "\" x2=\"" << W - right + 35 << "\" y1=\"" << ly << "\" y2=\"" << ly
           << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"" << (s.dashed ? " stroke-dasharray=\"6,4\"" : "")
           << "/><text x=\"" << W - right + 40 << "\" y=\"" << ly + 4 << "\">" << detail::escape(s.label)
           << "</text>\n";
    }
    os << "</svg>\n";
}

inline void write_patch_plot(const std::filesystem::path& path, const PatchPlot& plot) {
    constexpr double W = 560, H = 500, left = 50, top = 40, side = 400;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& poly : plot.polygons) {
        for (const auto& p : poly) {
            x0 = std::min(x0, p[0]);
            x1 = std::max(x1, p[0]);
            y0 = std::min(y0, p[1]);
            y1 = std::max(y1, p[1]);
        }
    }
    double vmin = std::numeric_limits<double>::infinity(), vmax = -vmin;
    for (double v : plot.values) {
        if (std::isfinite(v)) {
            vmin = std::min(vmin, v);
            vmax = std::max(vmax, v);
        }
    }
    if (!std::isfinite(x0)) {
        x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    }
    if (!std::isfinite(vmin)) {
        vmin = 0, vmax = 1;
    }
    const double span = std::max(x1 - x0, y1 - y0);
    const double vspan = vmax - vmin > 0 ? vmax - vmin : 1.0;
    auto px = [&](double a) { return left + (a - x0) / span * side; };
    auto py = [&](double b) { return top + side - (b - y0) / span * side; };
    using detail::fmt;
    std::ofstream os;
    detail::open_or_throw(os, path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << left + side / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
       << detail::escape(plot.title) << "</text>\n";
    for (std::size_t k = 0; k < plot.polygons.size(); ++k) {
        std::string pts;
        for (const auto& p : plot.polygons[k]) {
            pts += fmt(px(p[0])) + "," + fmt(py(p[1])) + " ";
        }
        const std::string c = detail::ramp((plot.values[k] - vmin) / vspan);
        os << "<polygon points=\"" << pts << "\" fill=\"" << c << "\" stroke=\"" << c << "\" stroke-width=\"0.3\"/>\n";
    }
    os << "<text x=\"" << left << "\" y=\"" << top + side + 20 << "\">[" << fmt(x0) << ", " << fmt(x1) << "] x ["
       << fmt(y0) << ", " << fmt(y1) << "]</text>\n";
    const double bx = left + side + 30;
    for (int i = 0; i < 50; ++i) {
        os << "<rect x=\"" << bx << "\" y=\"" << fmt(top + side - (i + 1) * side / 50) << "\" width=\"20\" height=\""
           << fmt(side / 50 + 0.5) << "\" fill=\"" << detail::ramp((i + 0.5) / 50) << "\"/>\n";
    }
    os << "<text x=\"" << bx + 25 << "\" y=\"" << top + side << "\">" << fmt(vmin) << "</text>\n";
    os << "<text x=\"" << bx + 25 << "\" y=\"" << top + 10 << "\">" << fmt(vmax) << "</text>\n";
    os << "</svg>\n";
}

}  // namespace fraccal::svg
