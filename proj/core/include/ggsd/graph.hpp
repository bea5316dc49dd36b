#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ggsd/errors.hpp"
#include "ggsd/tensor.hpp"

namespace ggsd {

// Undirected unweighted simple graph over labeled nodes. Edges are stored as
// (u,v) with u<v; no self-loops, no duplicates.
class Graph {
 public:
  Graph() = default;
  explicit Graph(std::size_t n) : n_(n) {}
  Graph(std::size_t n, std::vector<std::pair<int, int>> edges);

  std::size_t node_count() const { return n_; }
  std::size_t edge_count() const { return edges_.size(); }
  const std::vector<std::pair<int, int>> &edges() const { return edges_; }

  void add_edge(int u, int v);
  bool has_edge(int u, int v) const;
  std::vector<int> degrees() const;
  std::vector<std::vector<int>> adjacency_lists() const;
  bool connected() const;

  Graph relabeled(const std::vector<int> &perm) const;  // new label of i is perm[i]

  bool operator==(const Graph &o) const { return n_ == o.n_ && edges_ == o.edges_; }

 private:
  std::size_t n_ = 0;
  std::vector<std::pair<int, int>> edges_;  // sorted, u<v
};

enum class SpectrumSelection { Full, SmallestK, LargestK };

// Eigenvalues (ascending) and matching eigenvector columns of a symmetric
// matrix, possibly truncated to k pairs.
struct Spectrum {
  std::vector<double> eigenvalues;  // length k, ascending
  Tensor eigenvectors;              // [n, k], column j pairs with eigenvalues[j]
  std::size_t n = 0;
  SpectrumSelection selection = SpectrumSelection::Full;
  bool null_dropped = false;

  std::size_t k() const { return eigenvalues.size(); }
};

struct PerturbationReport {
  std::vector<double> delta_lambda;       // first-order eigenvalue shifts
  Tensor mixing;                          // [k,k], zero diagonal
  std::vector<std::uint8_t> unreliable;   // [k*k] flags where the eigengap is < 1e-8
  double order1 = 0.0;                    // Frobenius norms of the grouped error terms
  double order2 = 0.0;
  double order3 = 0.0;
};

// L = D - A.
Tensor laplacian(const Graph &g);

// Symmetric normalized Laplacian D^{-1/2} (D - A) D^{-1/2}; isolated nodes get
// zero rows.
Tensor normalized_laplacian(const Graph &g);

// Cyclic Jacobi eigendecomposition for symmetric matrices. Eigenvalues sorted
// ascending; each eigenvector column is sign-fixed so its largest-magnitude
// entry is positive. Throws ContractError for non-symmetric input and
// NumericError on non-convergence.
Spectrum eigendecompose_symmetric(const Tensor &m);

// Keeps k pairs from the requested end, optionally excluding the eigenvalue
// closest to zero first. Ascending order is preserved.
Spectrum truncate_spectrum(const Spectrum &s, std::size_t k, SpectrumSelection end,
                           bool drop_null);

// Phi Lambda Phi^T.
Tensor reconstruct_laplacian(const Spectrum &s);

// Reads a (possibly approximate) Laplacian back into a graph: off-diagonal
// entries negated, symmetrized by averaging, edge iff value > threshold.
Graph laplacian_to_adjacency(const Tensor &lhat, double threshold = 0.5);

// RMS of (Phi^T Phi - I) over all k^2 entries.
double orthogonality_rms(const Tensor &phi);

// phi^T L phi for a single column.
double dirichlet_energy(const std::vector<double> &phi_col, const Graph &g);

// First-order perturbation of a full spectrum under symmetric noise e, plus
// the Frobenius norms of the grouped reconstruction-error terms for a given
// (dphi, dlambda) perturbation.
PerturbationReport perturbation_analysis(const Spectrum &s, const Tensor &e,
                                         const Tensor &dphi,
                                         const std::vector<double> &dlambda);

// Frobenius norm helpers used across modules.
double frobenius_norm(const Tensor &m);
double frobenius_distance(const Tensor &a, const Tensor &b);

}  // namespace ggsd
