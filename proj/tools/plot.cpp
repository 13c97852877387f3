#include "plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "petduet/error.hpp"

namespace petduet::tools {

namespace {

constexpr double kWidth = 720.0;
constexpr double kHeight = 420.0;
constexpr double kLeft = 64.0;
constexpr double kRight = 24.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 56.0;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string escape(std::string_view text) {
  std::string out;
  for (char c : text) {
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

// A rounded step so an axis gets four to eight ticks.
double nice_step(double range) {
  if (range <= 0.0) return 1.0;
  const double raw = range / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (raw <= m * mag) return m * mag;
  }
  return 10.0 * mag;
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

void open_svg(std::ostringstream& out, std::string_view title) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
      << "</text>\n";
}

void y_axis(std::ostringstream& out, const Frame& f, std::string_view name) {
  const double step = nice_step(f.y1 - f.y0);
  for (double y = std::ceil(f.y0 / step) * step; y <= f.y1 + 1e-9; y += step) {
    out << "<line x1=\"" << num(kLeft) << "\" x2=\"" << num(kWidth - kRight) << "\" y1=\"" << num(f.py(y))
        << "\" y2=\"" << num(f.py(y)) << "\" stroke=\"#e4e4e4\"/>\n"
        << "<text x=\"" << num(kLeft - 6) << "\" y=\"" << num(f.py(y) + 4) << "\" text-anchor=\"end\">"
        << label(y) << "</text>\n";
  }
  out << "<text transform=\"translate(16," << num((kTop + kHeight - kBottom) / 2)
      << ") rotate(-90)\" text-anchor=\"middle\">" << escape(name) << "</text>\n";
  out << "<line x1=\"" << num(kLeft) << "\" x2=\"" << num(kLeft) << "\" y1=\"" << num(kTop) << "\" y2=\""
      << num(kHeight - kBottom) << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << num(kLeft) << "\" x2=\"" << num(kWidth - kRight) << "\" y1=\"" << num(kHeight - kBottom)
      << "\" y2=\"" << num(kHeight - kBottom) << "\" stroke=\"black\"/>\n";
}

}  // namespace

std::string loss_curve_svg(const training::RunLedger& ledger) {
  const auto& steps = ledger.steps();
  if (steps.empty()) throw ValidationError("cannot plot an empty ledger");
  double hi = 0.0;
  for (const auto& s : steps) hi = std::max(hi, s.loss.total);
  Frame f{static_cast<double>(steps.front().step), static_cast<double>(std::max(steps.back().step, steps.front().step + 1)),
          0.0, hi > 0.0 ? hi * 1.05 : 1.0};

  std::ostringstream out;
  open_svg(out, "Training loss");
  y_axis(out, f, "total loss");
  const double xstep = nice_step(f.x1 - f.x0);
  for (double x = std::ceil(f.x0 / xstep) * xstep; x <= f.x1 + 1e-9; x += xstep) {
    out << "<text x=\"" << num(f.px(x)) << "\" y=\"" << num(kHeight - kBottom + 18)
        << "\" text-anchor=\"middle\">" << label(x) << "</text>\n";
  }
  out << "<text x=\"" << num((kLeft + kWidth - kRight) / 2) << "\" y=\"" << num(kHeight - 12)
      << "\" text-anchor=\"middle\">step</text>\n";

  out << "<polyline fill=\"none\" stroke=\"#9ecae1\" stroke-width=\"1\" points=\"";
  for (const auto& s : steps) out << num(f.px(s.step)) << ',' << num(f.py(s.loss.total)) << ' ';
  out << "\"/>\n";

  const std::size_t window = std::max<std::size_t>(1, steps.size() / 50);
  out << "<polyline fill=\"none\" stroke=\"#08519c\" stroke-width=\"2\" points=\"";
  double acc = 0.0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    acc += steps[i].loss.total;
    if (i >= window) acc -= steps[i - window].loss.total;
    const double mean = acc / static_cast<double>(std::min(i + 1, window));
    out << num(f.px(steps[i].step)) << ',' << num(f.py(mean)) << ' ';
  }
  out << "\"/>\n";

  for (const auto& s : steps) {
    if (s.phase != training::Phase::kText) continue;
    out << "<circle cx=\"" << num(f.px(s.step)) << "\" cy=\"" << num(f.py(s.loss.total))
        << "\" r=\"2\" fill=\"#d94801\"/>\n";
  }
  out << "<text x=\"" << num(kWidth - kRight - 4) << "\" y=\"" << num(kTop + 12)
      << "\" text-anchor=\"end\" fill=\"#08519c\">moving average</text>\n"
      << "<text x=\"" << num(kWidth - kRight - 4) << "\" y=\"" << num(kTop + 28)
      << "\" text-anchor=\"end\" fill=\"#d94801\">text steps</text>\n";
  out << "</svg>\n";
  return out.str();
}

std::vector<AblationBarRow> parse_ablation_csv(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  if (!std::getline(in, line) || line != "variant,visual_i_ap,visual_g_ap,text_ap") {
    throw ValidationError("ablation CSV must start with variant,visual_i_ap,visual_g_ap,text_ap");
  }
  std::vector<AblationBarRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    AblationBarRow r;
    std::string a, b, c;
    if (!std::getline(fields, r.variant, ',') || !std::getline(fields, a, ',') || !std::getline(fields, b, ',') ||
        !std::getline(fields, c)) {
      throw ValidationError("malformed ablation CSV row '" + line + "'");
    }
    try {
      r.visual_i = std::stod(a);
      r.visual_g = std::stod(b);
      r.text = std::stod(c);
    } catch (const std::exception&) {
      throw ValidationError("non-numeric ablation CSV row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

std::string ablation_svg(const std::vector<AblationBarRow>& rows) {
  if (rows.empty()) throw ValidationError("cannot plot an empty ablation table");
  Frame f{0.0, static_cast<double>(rows.size()), 0.0, 1.0};
  std::ostringstream out;
  open_svg(out, "Prompt-strategy ablation");
  y_axis(out, f, "AP");
  const char* colors[] = {"#6baed6", "#fd8d3c", "#74c476"};
  const char* names[] = {"Visual-I", "Visual-G", "Text"};
  const double group = f.px(1.0) - f.px(0.0);
  const double bar = group * 0.8 / 3.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double values[] = {rows[i].visual_i, rows[i].visual_g, rows[i].text};
    for (int k = 0; k < 3; ++k) {
      const double x = f.px(static_cast<double>(i)) + group * 0.1 + bar * k;
      const double v = std::clamp(values[k], 0.0, 1.0);
      out << "<rect x=\"" << num(x) << "\" y=\"" << num(f.py(v)) << "\" width=\"" << num(bar * 0.92)
          << "\" height=\"" << num(f.py(0.0) - f.py(v)) << "\" fill=\"" << colors[k] << "\"/>\n";
    }
    out << "<text x=\"" << num(f.px(i + 0.5)) << "\" y=\"" << num(kHeight - kBottom + 18)
        << "\" text-anchor=\"middle\">" << escape(rows[i].variant) << "</text>\n";
  }
  for (int k = 0; k < 3; ++k) {
    out << "<rect x=\"" << num(kWidth - kRight - 90) << "\" y=\"" << num(kTop + 4 + 16 * k)
        << "\" width=\"10\" height=\"10\" fill=\"" << colors[k] << "\"/>\n"
        << "<text x=\"" << num(kWidth - kRight - 74) << "\" y=\"" << num(kTop + 13 + 16 * k) << "\">" << names[k]
        << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace petduet::tools
