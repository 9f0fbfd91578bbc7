#pragma once

#include <fstream>
#include <sstream>
#include <string>

#include "uncspan/nn.hpp"

namespace uncspan {

// Model checkpoint, version 1. Plain text:
//
//   uncspan-model-v1
//   layers = <L>
//   [layer <k>]
//   rows = <out>
//   cols = <in>
//   activation = relu|tanh|identity
//   W = <rows*cols doubles, row-major, space separated>
//   b = <rows doubles>
//
// Doubles are written with 17 significant digits, so a save/load round
// trip reproduces the exact bit pattern.

inline void save_model(const ModelParams& params, const std::string& path) {
  params.validate();
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "uncspan-model-v1\n";
  out << "layers = " << params.layers.size() << "\n";
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const Layer& l = params.layers[k];
    out << "[layer " << k << "]\n";
    out << "rows = " << l.weight.rows() << "\n";
    out << "cols = " << l.weight.cols() << "\n";
    out << "activation = " << activation_name(l.act) << "\n";
    out << "W =";
    for (int r = 0; r < l.weight.rows(); ++r)
      for (int c = 0; c < l.weight.cols(); ++c) out << ' ' << fmt17(l.weight(r, c));
    out << "\nb =";
    for (int r = 0; r < l.bias.size(); ++r) out << ' ' << fmt17(l.bias(r));
    out << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

namespace detail {

inline std::string expect_line(std::istream& in, long& line_no) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("unexpected end of file", line_no);
  ++line_no;
  return line;
}

inline std::string expect_kv(std::istream& in, long& line_no, const std::string& key) {
  std::string line = expect_line(in, line_no);
  const std::string prefix = key + " =";
  if (line.rfind(prefix, 0) != 0)
    throw ParseError("expected '" + key + " = ...', got '" + line + "'", line_no - 1);
  std::string value = line.substr(prefix.size());
  if (!value.empty() && value.front() == ' ') value.erase(0, 1);
  return value;
}

}  // namespace detail

inline ModelParams load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  long line_no = 0;
  std::string header = detail::expect_line(in, line_no);
  if (header != "uncspan-model-v1")
    throw ParseError("bad checkpoint header '" + header + "'", 1);
  long num_layers = parse_long(detail::expect_kv(in, line_no, "layers"), "layers", line_no);
  if (num_layers < 1) throw ParseError("layer count must be positive", line_no);

  ModelParams params;
  for (long k = 0; k < num_layers; ++k) {
    std::string marker = detail::expect_line(in, line_no);
    if (marker != "[layer " + std::to_string(k) + "]")
      throw ParseError("expected '[layer " + std::to_string(k) + "]', got '" + marker + "'",
                       line_no - 1);
    Layer layer;
    long rows = parse_long(detail::expect_kv(in, line_no, "rows"), "rows", line_no);
    long cols = parse_long(detail::expect_kv(in, line_no, "cols"), "cols", line_no);
    if (rows < 1 || cols < 1) throw ParseError("matrix dims must be positive", line_no);
    layer.act = activation_from_name(detail::expect_kv(in, line_no, "activation"));

    std::istringstream ws(detail::expect_kv(in, line_no, "W"));
    layer.weight.resize(rows, cols);
    std::string tok;
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        if (!(ws >> tok)) throw ParseError("too few weight values", line_no - 1);
        layer.weight(r, c) = parse_double(tok, "weight", line_no - 1);
      }
    if (ws >> tok) throw ParseError("trailing weight values", line_no - 1);

    std::istringstream bs(detail::expect_kv(in, line_no, "b"));
    layer.bias.resize(rows);
    for (long r = 0; r < rows; ++r) {
      if (!(bs >> tok)) throw ParseError("too few bias values", line_no - 1);
      layer.bias(r) = parse_double(tok, "bias", line_no - 1);
    }
    if (bs >> tok) throw ParseError("trailing bias values", line_no - 1);
    params.layers.push_back(std::move(layer));
  }
  params.validate();
  return params;
}

}  // namespace uncspan
