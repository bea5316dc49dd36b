#include "ggsd/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ggsd {

// ---- Graph -------------------------------------------------------------------

Graph::Graph(std::size_t n, std::vector<std::pair<int, int>> edges) : n_(n) {
  for (auto &[u, v] : edges) add_edge(u, v);
}

void Graph::add_edge(int u, int v) {
  if (u == v) throw ContractError("graph: self-loop rejected");
  if (u > v) std::swap(u, v);
  if (u < 0 || static_cast<std::size_t>(v) >= n_)
    throw ContractError("graph: endpoint out of range");
  auto e = std::make_pair(u, v);
  auto it = std::lower_bound(edges_.begin(), edges_.end(), e);
  if (it != edges_.end() && *it == e) return;  // duplicates collapse
  edges_.insert(it, e);
}

bool Graph::has_edge(int u, int v) const {
  if (u > v) std::swap(u, v);
  return std::binary_search(edges_.begin(), edges_.end(), std::make_pair(u, v));
}

std::vector<int> Graph::degrees() const {
  std::vector<int> d(n_, 0);
  for (auto &[u, v] : edges_) {
    ++d[u];
    ++d[v];
  }
  return d;
}

std::vector<std::vector<int>> Graph::adjacency_lists() const {
  std::vector<std::vector<int>> adj(n_);
  for (auto &[u, v] : edges_) {
    adj[u].push_back(v);
    adj[v].push_back(u);
  }
  return adj;
}

bool Graph::connected() const {
  if (n_ == 0) return true;
  auto adj = adjacency_lists();
  std::vector<char> seen(n_, 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  std::size_t visited = 1;
  while (!stack.empty()) {
    int u = stack.back();
    stack.pop_back();
    for (int w : adj[u])
      if (!seen[w]) {
        seen[w] = 1;
        ++visited;
        stack.push_back(w);
      }
  }
  return visited == n_;
}

Graph Graph::relabeled(const std::vector<int> &perm) const {
  Graph out(n_);
  for (auto &[u, v] : edges_) out.add_edge(perm[u], perm[v]);
  return out;
}

// ---- Laplacians ----------------------------------------------------------------

Tensor laplacian(const Graph &g) {
  const std::size_t n = g.node_count();
  Tensor l({n, n});
  for (auto &[u, v] : g.edges()) {
    l.at(u, v) = -1.0;
    l.at(v, u) = -1.0;
    l.at(u, u) += 1.0;
    l.at(v, v) += 1.0;
  }
  return l;
}

Tensor normalized_laplacian(const Graph &g) {
  const std::size_t n = g.node_count();
  Tensor l = laplacian(g);
  auto deg = g.degrees();
  std::vector<double> dinv(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    if (deg[i] > 0) dinv[i] = 1.0 / std::sqrt(static_cast<double>(deg[i]));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) l.at(i, j) *= dinv[i] * dinv[j];
  return l;
}

// ---- Eigendecomposition ---------------------------------------------------------

double frobenius_norm(const Tensor &m) {
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) s += m[i] * m[i];
  return std::sqrt(s);
}

double frobenius_distance(const Tensor &a, const Tensor &b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

Spectrum eigendecompose_symmetric(const Tensor &m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    throw ContractError("eigendecompose: square matrix required");
  const std::size_t n = m.dim(0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m.at(i, j) - m.at(j, i)) > 1e-10)
        throw ContractError("eigendecompose: input not symmetric within 1e-10");

  Tensor a = m;
  Tensor v({n, n});
  for (std::size_t i = 0; i < n; ++i) v.at(i, i) = 1.0;

  // off-diagonal tolerance is relative to the input scale; 1e-12 on unit-norm
  // matrices, never below the attainable roundoff floor for large ones
  const double scale = std::max(1.0, frobenius_norm(m));
  const double tol = 1e-12 * scale;
  const int max_sweeps = 100;

  auto off_norm = [&]() {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * a.at(i, j) * a.at(i, j);
    return std::sqrt(s);
  };

  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    if (off_norm() < tol) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double app = a.at(p, p), aqq = a.at(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a.at(i, p), aiq = a.at(i, q);
          a.at(i, p) = c * aip - s * aiq;
          a.at(i, q) = s * aip + c * aiq;
        }
        for (std::size_t j = 0; j < n; ++j) {
          const double apj = a.at(p, j), aqj = a.at(q, j);
          a.at(p, j) = c * apj - s * aqj;
          a.at(q, j) = s * apj + c * aqj;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v.at(i, p), viq = v.at(i, q);
          v.at(i, p) = c * vip - s * viq;
          v.at(i, q) = s * vip + c * viq;
        }
      }
    }
  }
  if (sweep == max_sweeps && off_norm() >= tol)
    throw NumericError("jacobi eigendecomposition did not converge in " +
                       std::to_string(max_sweeps) + " sweeps");

  // sort ascending, carrying columns
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t x, std::size_t y) { return a.at(x, x) < a.at(y, y); });

  Spectrum s;
  s.n = n;
  s.selection = SpectrumSelection::Full;
  s.eigenvalues.resize(n);
  s.eigenvectors = Tensor({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    s.eigenvalues[j] = a.at(src, src);
    // sign convention: largest-magnitude entry positive
    double best = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (std::abs(v.at(i, src)) > std::abs(best)) best = v.at(i, src);
    const double flip = best < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) s.eigenvectors.at(i, j) = flip * v.at(i, src);
  }
  return s;
}

Spectrum truncate_spectrum(const Spectrum &s, std::size_t k, SpectrumSelection end,
                           bool drop_null) {
  if (s.selection != SpectrumSelection::Full)
    throw ContractError("truncate_spectrum: input must be a full spectrum");
  if (end == SpectrumSelection::Full)
    throw ContractError("truncate_spectrum: pick an end");
  const std::size_t n = s.n;
  const std::size_t avail = n - (drop_null ? 1 : 0);
  if (k > avail) throw ContractError("truncate_spectrum: k exceeds available pairs");

  std::size_t begin = 0, count = n;
  if (drop_null) {
    // ascending order puts the null pair of a PSD matrix first
    std::size_t null_idx = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (std::abs(s.eigenvalues[j]) < std::abs(s.eigenvalues[null_idx])) null_idx = j;
    if (null_idx != 0)
      throw ContractError("truncate_spectrum: null eigenvalue is not the smallest");
    begin = 1;
    count = n - 1;
  }
  const std::size_t first =
      (end == SpectrumSelection::SmallestK) ? begin : begin + count - k;

  Spectrum out;
  out.n = n;
  out.selection = end;
  out.null_dropped = drop_null;
  out.eigenvalues.assign(s.eigenvalues.begin() + first, s.eigenvalues.begin() + first + k);
  out.eigenvectors = Tensor({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j)
      out.eigenvectors.at(i, j) = s.eigenvectors.at(i, first + j);
  return out;
}

Tensor reconstruct_laplacian(const Spectrum &s) {
  const std::size_t n = s.n, k = s.k();
  Tensor l({n, n});
  for (std::size_t j = 0; j < k; ++j) {
    const double lam = s.eigenvalues[j];
    if (lam == 0.0) continue;
    for (std::size_t r = 0; r < n; ++r) {
      const double pr = s.eigenvectors.at(r, j) * lam;
      for (std::size_t c = 0; c < n; ++c) l.at(r, c) += pr * s.eigenvectors.at(c, j);
    }
  }
  return l;
}

Graph laplacian_to_adjacency(const Tensor &lhat, double threshold) {
  if (lhat.rank() != 2 || lhat.dim(0) != lhat.dim(1))
    throw ContractError("laplacian_to_adjacency: square matrix required");
  const std::size_t n = lhat.dim(0);
  Graph g(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double a = 0.5 * (-lhat.at(i, j) - lhat.at(j, i));
      if (a > threshold) g.add_edge(static_cast<int>(i), static_cast<int>(j));
    }
  return g;
}

double orthogonality_rms(const Tensor &phi) {
  if (phi.rank() != 2 || phi.dim(1) == 0)
    throw ContractError("orthogonality_rms: [n,k] matrix with k >= 1 required");
  const std::size_t n = phi.dim(0), k = phi.dim(1);
  double sum_sq = 0.0;
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += phi.at(i, a) * phi.at(i, b);
      const double d = dot - (a == b ? 1.0 : 0.0);
      sum_sq += d * d;
    }
  return std::sqrt(sum_sq / static_cast<double>(k * k));
}

double dirichlet_energy(const std::vector<double> &phi_col, const Graph &g) {
  if (phi_col.size() != g.node_count())
    throw ContractError("dirichlet_energy: vector length must equal node count");
  double e = 0.0;
  for (auto &[u, v] : g.edges()) {
    const double d = phi_col[u] - phi_col[v];
    e += d * d;
  }
  return e;
}

PerturbationReport perturbation_analysis(const Spectrum &s, const Tensor &e,
                                         const Tensor &dphi,
                                         const std::vector<double> &dlambda) {
  if (s.selection != SpectrumSelection::Full)
    throw ContractError("perturbation_analysis: full spectrum required");
  const std::size_t n = s.n, k = s.k();
  if (e.rank() != 2 || e.dim(0) != n || e.dim(1) != n)
    throw ContractError("perturbation_analysis: e must be n x n");

  PerturbationReport rep;
  rep.delta_lambda.resize(k);
  rep.mixing = Tensor({k, k});
  rep.unreliable.assign(k * k, 0);

  Tensor ephi({n, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < n; ++c) acc += e.at(i, c) * s.eigenvectors.at(c, j);
      ephi.at(i, j) = acc;
    }
  Tensor quad({k, k});
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += s.eigenvectors.at(i, a) * ephi.at(i, b);
      quad.at(a, b) = acc;
    }

  for (std::size_t i = 0; i < k; ++i) rep.delta_lambda[i] = quad.at(i, i);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      const double gap = s.eigenvalues[j] - s.eigenvalues[i];
      if (std::abs(gap) < 1e-8) {
        rep.unreliable[i * k + j] = 1;  // reported, not thrown
        rep.mixing.at(i, j) = 0.0;
      } else {
        rep.mixing.at(i, j) = quad.at(i, j) / gap;
      }
    }

  const bool have_d = dphi.size() == n * k && dlambda.size() == k;
  if (have_d) {
    auto term = [&](const Tensor &a, const std::vector<double> &lam, const Tensor &b) {
      // a diag(lam) b^T with a,b: [n,k]
      Tensor t({n, n});
      for (std::size_t j = 0; j < k; ++j) {
        if (lam[j] == 0.0) continue;
        for (std::size_t r = 0; r < n; ++r) {
          const double pr = a.at(r, j) * lam[j];
          for (std::size_t c = 0; c < n; ++c) t.at(r, c) += pr * b.at(c, j);
        }
      }
      return t;
    };
    auto add_t = [](Tensor &x, const Tensor &y) {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
    };
    const Tensor &phi = s.eigenvectors;
    const std::vector<double> &lam = s.eigenvalues;
    Tensor o1 = term(phi, dlambda, phi);
    add_t(o1, term(phi, lam, dphi));
    add_t(o1, term(dphi, lam, phi));
    Tensor o2 = term(phi, dlambda, dphi);
    add_t(o2, term(dphi, dlambda, phi));
    add_t(o2, term(dphi, lam, dphi));
    Tensor o3 = term(dphi, dlambda, dphi);
    rep.order1 = frobenius_norm(o1);
    rep.order2 = frobenius_norm(o2);
    rep.order3 = frobenius_norm(o3);
  }
  return rep;
}

}  // namespace ggsd
