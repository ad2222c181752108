#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "pmse/errors.hpp"

namespace pmse {

struct SvgSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    std::string color = "#1f77b4";
};

// Minimal static line chart, enough for error-probability curves and
// selection-probability ladders against the sample size.
inline void write_line_chart(const std::string& path, const std::string& title,
                             const std::string& xlabel, const std::string& ylabel,
                             const std::vector<SvgSeries>& series, bool log_x = true) {
    if (series.empty()) throw config_error("write_line_chart: no series");
    const double W = 640, H = 420, ml = 70, mr = 20, mt = 40, mb = 55;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            const double xv = log_x ? std::log10(s.x[i]) : s.x[i];
            xmin = std::min(xmin, xv);
            xmax = std::max(xmax, xv);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (!(xmax > xmin)) xmax = xmin + 1.0;
    ymin = std::min(ymin, 0.0);
    ymax = std::max(ymax * 1.08, ymin + 1e-6);
    auto px = [&](double x) {
        const double v = log_x ? std::log10(x) : x;
        return ml + (v - xmin) / (xmax - xmin) * (W - ml - mr);
    };
    auto py = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

    std::ofstream out(path);
    if (!out) throw config_error("cannot write " + path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H
        << "' viewBox='0 0 " << W << " " << H << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << W / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    // axes
    out << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='"
        << H - mb << "' stroke='black'/>\n";
    out << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    // y ticks
    for (int i = 0; i <= 4; ++i) {
        const double yv = ymin + (ymax - ymin) * i / 4.0;
        const double yy = py(yv);
        out << "<line x1='" << ml - 4 << "' y1='" << yy << "' x2='" << ml << "' y2='" << yy
            << "' stroke='black'/>\n";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3g", yv);
        out << "<text x='" << ml - 8 << "' y='" << yy + 4
            << "' text-anchor='end' font-size='11'>" << buf << "</text>\n";
    }
    // x ticks at the data points of the first series
    for (double xv : series.front().x) {
        const double xx = px(xv);
        out << "<line x1='" << xx << "' y1='" << H - mb << "' x2='" << xx << "' y2='"
            << H - mb + 4 << "' stroke='black'/>\n";
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", xv);
        out << "<text x='" << xx << "' y='" << H - mb + 18
            << "' text-anchor='middle' font-size='11'>" << buf << "</text>\n";
    }
    out << "<text x='" << (ml + W - mr) / 2 << "' y='" << H - 12
        << "' text-anchor='middle' font-size='12'>" << xlabel << "</text>\n";
    out << "<text x='16' y='" << (mt + H - mb) / 2
        << "' text-anchor='middle' font-size='12' transform='rotate(-90 16 "
        << (mt + H - mb) / 2 << ")'>" << ylabel << "</text>\n";

    double legend_y = mt + 6;
    for (const auto& s : series) {
        out << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.8' points='";
        for (size_t i = 0; i < s.x.size(); ++i)
            out << px(s.x[i]) << "," << py(s.y[i]) << " ";
        out << "'/>\n";
        for (size_t i = 0; i < s.x.size(); ++i)
            out << "<circle cx='" << px(s.x[i]) << "' cy='" << py(s.y[i])
                << "' r='2.6' fill='" << s.color << "'/>\n";
        out << "<line x1='" << W - mr - 130 << "' y1='" << legend_y << "' x2='"
            << W - mr - 110 << "' y2='" << legend_y << "' stroke='" << s.color
            << "' stroke-width='2'/>\n";
        out << "<text x='" << W - mr - 104 << "' y='" << legend_y + 4
            << "' font-size='11'>" << s.label << "</text>\n";
        legend_y += 16;
    }
    out << "</svg>\n";
}

} // namespace pmse
