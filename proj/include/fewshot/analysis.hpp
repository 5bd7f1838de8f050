// Copyright 2026 The fewshot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Visual-semantic alignment (regularized CCA) and attention-vector
// clustering (Pearson similarity, average linkage, Newick export).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fewshot/datastore/text_io.hpp"
#include "fewshot/diffmath/matrix.hpp"

namespace fewshot {

namespace detail {

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline Matrix from_eigen(const Eigen::MatrixXd& m) {
  Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

/// (S + eps I)^{-1/2} for a symmetric PSD S.
inline Eigen::MatrixXd inverse_sqrt(const Eigen::MatrixXd& s, double eps, const char* side) {
  const Eigen::Index d = s.rows();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s + eps * Eigen::MatrixXd::Identity(d, d));
  const Eigen::VectorXd ev = es.eigenvalues();
  const double top = std::max(ev.maxCoeff(), 0.0);
  const double floor = 1e-12 * std::max(top, 1e-300);
  if (!(ev.minCoeff() > floor)) {
    fail(ErrorKind::numeric, std::string(side) + " covariance is singular (smallest eigenvalue " +
                                 io::format_real(ev.minCoeff()) + "); use a whitening regularizer eps > 0");
  }
  return es.eigenvectors() * ev.cwiseInverse().cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

struct CcaModel {
  Matrix mean_x, mean_y;   // 1 x d
  Matrix proj_x, proj_y;   // d_v x r, d_s x r
  std::vector<double> correlations;  // top r, descending, in [0,1]
  std::vector<double> spectrum;      // all min(d_v, d_s) canonical correlations
  double eps_x = 0.0, eps_y = 0.0;

  std::size_t components() const { return correlations.size(); }
};

/// Regularized CCA between paired rows of x (n x d_v) and y (n x d_s).
/// `epsilon` unset uses 1e-3 * trace(S)/d per side; 0 disables regularization.
inline CcaModel cca_fit(const Matrix& x, const Matrix& y, std::size_t r, std::optional<double> epsilon = std::nullopt) {
  const std::size_t n = x.rows();
  if (y.rows() != n) {
    fail(ErrorKind::dimension, "cca_fit: " + std::to_string(n) + " visual rows vs " + std::to_string(y.rows()) +
                                   " semantic rows");
  }
  if (n < 2) fail(ErrorKind::input, "cca_fit needs at least 2 paired rows");
  const std::size_t bound = std::min({x.cols(), y.cols(), n - 1});
  if (r == 0 || r > bound) {
    fail(ErrorKind::config, "cca_fit: r=" + std::to_string(r) + " outside [1, min(d_v, d_s, n-1)] = [1, " +
                                std::to_string(bound) + "]");
  }
  if (epsilon && !(*epsilon >= 0.0)) fail(ErrorKind::config, "cca_fit: eps must be >= 0");

  Eigen::MatrixXd ex = detail::to_eigen(x), ey = detail::to_eigen(y);
  const Eigen::RowVectorXd mx = ex.colwise().mean(), my = ey.colwise().mean();
  ex.rowwise() -= mx;
  ey.rowwise() -= my;
  const double denom = static_cast<double>(n - 1);
  const Eigen::MatrixXd sxx = ex.transpose() * ex / denom;
  const Eigen::MatrixXd syy = ey.transpose() * ey / denom;
  const Eigen::MatrixXd sxy = ex.transpose() * ey / denom;

  CcaModel m;
  m.eps_x = epsilon ? *epsilon : 1e-3 * sxx.trace() / static_cast<double>(x.cols());
  m.eps_y = epsilon ? *epsilon : 1e-3 * syy.trace() / static_cast<double>(y.cols());
  const Eigen::MatrixXd wx = detail::inverse_sqrt(sxx, m.eps_x, "visual");
  const Eigen::MatrixXd wy = detail::inverse_sqrt(syy, m.eps_y, "semantic");

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(wx * sxy * wy, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd s = svd.singularValues();
  for (Eigen::Index i = 0; i < s.size(); ++i) m.spectrum.push_back(std::clamp(s(i), 0.0, 1.0));
  m.correlations.assign(m.spectrum.begin(), m.spectrum.begin() + static_cast<std::ptrdiff_t>(r));
  const auto ri = static_cast<Eigen::Index>(r);
  m.proj_x = detail::from_eigen(wx * svd.matrixU().leftCols(ri));
  m.proj_y = detail::from_eigen(wy * svd.matrixV().leftCols(ri));
  m.mean_x = detail::from_eigen(mx);
  m.mean_y = detail::from_eigen(my);
  return m;
}

/// Pearson correlation of two equal-length sequences; `what` names the
/// offender when one of them is constant.
inline double pearson(std::span<const double> a, std::span<const double> b, const std::string& what) {
  if (a.size() != b.size()) fail(ErrorKind::dimension, "pearson: length mismatch for " + what);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) fail(ErrorKind::undefined_correlation, "correlation undefined: " + what + " has zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Correlation of the first canonical coordinates on held-out pairs.
inline double cca_correlation(const CcaModel& m, const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) fail(ErrorKind::dimension, "cca_correlation: unpaired rows");
  if (x.rows() < 2) fail(ErrorKind::input, "cca_correlation needs at least 2 held-out pairs");
  if (x.cols() != m.proj_x.rows() || y.cols() != m.proj_y.rows()) {
    fail(ErrorKind::dimension, "cca_correlation: held-out dims " + std::to_string(x.cols()) + "/" +
                                   std::to_string(y.cols()) + " vs model " + std::to_string(m.proj_x.rows()) + "/" +
                                   std::to_string(m.proj_y.rows()));
  }
  std::vector<double> u(x.rows()), v(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t d = 0; d < x.cols(); ++d) u[i] += (x(i, d) - m.mean_x[d]) * m.proj_x(d, 0);
    for (std::size_t d = 0; d < y.cols(); ++d) v[i] += (y(i, d) - m.mean_y[d]) * m.proj_y(d, 0);
  }
  return pearson(u, v, "held-out canonical coordinate");
}

/// S_ij = Pearson(a_i, a_j) over the rows of `attention`.
inline Matrix attention_similarity(const Matrix& attention, const std::vector<std::string>& labels) {
  const std::size_t l = attention.rows();
  if (l < 2) fail(ErrorKind::input, "attention_similarity needs at least 2 classes");
  if (labels.size() != l) fail(ErrorKind::dimension, "attention_similarity: one label per row required");
  for (std::size_t i = 0; i < l; ++i) {
    auto r = attention.row(i);
    if (std::all_of(r.begin(), r.end(), [&](double v) { return v == r[0]; })) {
      fail(ErrorKind::undefined_correlation, "attention vector of class '" + labels[i] + "' is constant");
    }
  }
  Matrix s(l, l);
  for (std::size_t i = 0; i < l; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < l; ++j) s(i, j) = s(j, i) = pearson(attention.row(i), attention.row(j), "class '" + labels[i] + "'");
  }
  return s;
}

struct Merge {
  std::size_t a = 0, b = 0;  // node ids: leaves 0..L-1, merge k creates node L+k
  double height = 0.0;       // average-linkage distance at the merge
  std::size_t size = 0;
};

struct Dendrogram {
  std::vector<std::string> labels;
  std::vector<Merge> merges;

  std::size_t leaves() const { return labels.size(); }
};

/// Agglomerative average linkage on distance 1 - S. Ties go to the pair whose
/// smallest leaf indices are smallest.
inline Dendrogram hierarchical_cluster(const Matrix& s, const std::vector<std::string>& labels) {
  const std::size_t l = s.rows();
  if (s.cols() != l) fail(ErrorKind::input, "similarity matrix must be square, got " + s.shape());
  if (labels.size() != l) fail(ErrorKind::dimension, "hierarchical_cluster: one label per row required");
  if (l == 0) fail(ErrorKind::input, "hierarchical_cluster: no leaves");
  for (std::size_t i = 0; i < l; ++i) {
    if (std::abs(s(i, i) - 1.0) > 1e-9) fail(ErrorKind::input, "similarity diagonal entry " + std::to_string(i) + " is not 1");
    for (std::size_t j = 0; j < i; ++j) {
      if (!std::isfinite(s(i, j)) || std::abs(s(i, j) - s(j, i)) > 1e-9) {
        fail(ErrorKind::input, "similarity matrix asymmetric at (" + std::to_string(i) + "," + std::to_string(j) + ")");
      }
    }
  }

  struct Cluster {
    std::size_t node, size, min_leaf;
  };
  std::vector<Cluster> active;
  for (std::size_t i = 0; i < l; ++i) active.push_back({i, 1, i});
  // dist[i][j] between active slots i and j.
  std::vector<std::vector<double>> dist(l, std::vector<double>(l, 0.0));
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < l; ++j) dist[i][j] = 1.0 - 0.5 * (s(i, j) + s(j, i));

  Dendrogram out;
  out.labels = labels;
  while (active.size() > 1) {
    std::size_t bi = 0, bj = 1;
    for (std::size_t i = 0; i < active.size(); ++i) {
      for (std::size_t j = i + 1; j < active.size(); ++j) {
        const double d = dist[i][j], best = dist[bi][bj];
        auto key = [&](std::size_t x, std::size_t y) {
          return std::pair(std::min(active[x].min_leaf, active[y].min_leaf), std::max(active[x].min_leaf, active[y].min_leaf));
        };
        if (d < best || (d == best && key(i, j) < key(bi, bj))) {
          bi = i;
          bj = j;
        }
      }
    }
    const Cluster a = active[bi], b = active[bj];
    Merge m{std::min(a.node, b.node), std::max(a.node, b.node), dist[bi][bj], a.size + b.size};
    out.merges.push_back(m);

    const double na = static_cast<double>(a.size), nb = static_cast<double>(b.size);
    for (std::size_t k = 0; k < active.size(); ++k) {
      if (k == bi || k == bj) continue;
      dist[bi][k] = dist[k][bi] = (na * dist[bi][k] + nb * dist[bj][k]) / (na + nb);
    }
    active[bi] = {l + out.merges.size() - 1, a.size + b.size, std::min(a.min_leaf, b.min_leaf)};
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    dist.erase(dist.begin() + static_cast<std::ptrdiff_t>(bj));
    for (auto& row : dist) row.erase(row.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  return out;
}

/// Flat clustering into k groups by undoing the last k-1 merges. Cluster ids
/// are numbered by first leaf.
inline std::vector<std::size_t> cut_dendrogram(const Dendrogram& d, std::size_t k) {
  const std::size_t l = d.leaves();
  if (k == 0 || k > l) fail(ErrorKind::config, "cut_dendrogram: k=" + std::to_string(k) + " outside [1, " + std::to_string(l) + "]");
  std::vector<std::size_t> parent(l + d.merges.size());
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < l - k; ++i) {
    const auto& m = d.merges[i];
    parent[find(m.a)] = l + i;
    parent[find(m.b)] = l + i;
  }
  std::vector<std::size_t> out(l);
  std::vector<std::size_t> roots;
  for (std::size_t i = 0; i < l; ++i) {
    const auto r = find(i);
    auto it = std::find(roots.begin(), roots.end(), r);
    if (it == roots.end()) {
      roots.push_back(r);
      out[i] = roots.size() - 1;
    } else {
      out[i] = static_cast<std::size_t>(it - roots.begin());
    }
  }
  return out;
}

/// Fraction of leaf pairs on which two partitions agree.
inline double rand_index(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.size() != b.size()) fail(ErrorKind::dimension, "rand_index: partitions differ in size");
  if (a.size() < 2) fail(ErrorKind::input, "rand_index needs at least 2 items");
  std::size_t agree = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j, ++total) agree += (a[i] == a[j]) == (b[i] == b[j]);
  }
  return static_cast<double>(agree) / static_cast<double>(total);
}

namespace detail {

inline std::string newick_label(const std::string& s) {
  if (s.find_first_of(" \t()[]':;,") == std::string::npos && !s.empty()) return s;
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') out += '\'';
    out += c;
  }
  return out + "'";
}

}  // namespace detail

/// Newick text with branch lengths under the midpoint convention: a node
/// merged at distance h sits at height h/2.
inline std::string export_newick(const Dendrogram& d) {
  const std::size_t l = d.leaves();
  if (l == 0) fail(ErrorKind::input, "export_newick: empty dendrogram");
  if (d.merges.size() != l - 1) fail(ErrorKind::input, "export_newick: dendrogram is incomplete");
  auto height = [&](std::size_t node) { return node < l ? 0.0 : d.merges[node - l].height / 2.0; };
  // Iterative post-order to stay safe on deep trees.
  std::vector<std::string> text(l + d.merges.size());
  for (std::size_t i = 0; i < l; ++i) text[i] = detail::newick_label(d.labels[i]);
  for (std::size_t k = 0; k < d.merges.size(); ++k) {
    const auto& m = d.merges[k];
    const double h = m.height / 2.0;
    text[l + k] = "(" + text[m.a] + ":" + io::format_real(h - height(m.a)) + "," + text[m.b] + ":" +
                  io::format_real(h - height(m.b)) + ")";
    text[m.a].clear();
    text[m.b].clear();
  }
  return text.back() + ";";
}

/// `label\tv1\tv2...` per row, 17 significant digits.
inline std::string format_labeled_vectors(const Matrix& vectors, const std::vector<std::string>& labels) {
  if (labels.size() != vectors.rows()) fail(ErrorKind::dimension, "one label per vector required");
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < vectors.rows(); ++i) {
    out += labels[i];
    for (double v : vectors.row(i)) {
      std::snprintf(buf, sizeof buf, "\t%.17g", v);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline void export_prototypes(const Matrix& vectors, const std::vector<std::string>& labels,
                              const std::filesystem::path& path) {
  io::write_file(path, format_labeled_vectors(vectors, labels));
}

struct LabeledVectors {
  Matrix vectors;
  std::vector<std::string> labels;
};

inline LabeledVectors parse_labeled_vectors(std::string_view text, const std::filesystem::path& origin) {
  LabeledVectors out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, '\t');
    std::vector<double> v;
    for (std::size_t i = 1; i < f.size(); ++i) v.push_back(io::parse_real(f[i], origin, line_no));
    if (v.empty()) fail(ErrorKind::parse, io::where(origin, line_no) + ": label without values");
    if (out.vectors.empty() && out.labels.empty()) out.vectors = Matrix(0, v.size());
    if (v.size() != out.vectors.cols()) fail(ErrorKind::parse, io::where(origin, line_no) + ": ragged vector");
    out.vectors.append_row(v);
    out.labels.emplace_back(f[0]);
  }
  return out;
}

inline LabeledVectors load_labeled_vectors(const std::filesystem::path& path) {
  return parse_labeled_vectors(io::read_file(path), path);
}

}  // namespace fewshot
