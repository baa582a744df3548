#pragma once

// Exact information quantities on small discrete tables, and a checker for
// the residual lower bound on I(m; a_t | a_{t-1}) together with each
// intermediate identity of its derivation.

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace copycat::mi {

class NotNormalized : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kNormTolerance = 1e-12;

/// p[m][a_prev][a_cur]; actions are integers 0..A-1.
class DiscreteJoint {
 public:
  DiscreteJoint(int m_size, int a_size, std::vector<double> probabilities);

  int m_size() const { return m_; }
  int a_size() const { return a_; }
  /// Residual alphabet size 2A-1; residual r = a_cur - a_prev maps to index r + A - 1.
  int r_size() const { return 2 * a_ - 1; }

  double operator()(int m, int a_prev, int a_cur) const {
    return p_[(static_cast<std::size_t>(m) * a_ + a_prev) * a_ + a_cur];
  }
  std::span<const double> data() const { return p_; }

 private:
  int m_;
  int a_;
  std::vector<double> p_;
};

/// Shannon entropy in bits, 0 log 0 := 0.
double entropy(std::span<const double> marginal);

/// H(X | Y) from a joint table p(x, y) (rows x, cols y).
double cond_entropy(const Eigen::MatrixXd& joint_xy);

/// I(X; Y | Z) from a joint p(x, y, z) stored as one X x Y matrix per z.
double cond_mutual_info(std::span<const Eigen::MatrixXd> joint_xy_per_z);

struct TheoremCheck {
  double lhs = 0.0;  // I(m; a_t | a_prev)
  double rhs = 0.0;  // H(r | a_prev) - H(r | m)
  double slack = 0.0;
  bool holds = false;
  // Residuals of the derivation's steps: three equalities, then the final
  // conditioning gap H(r|m) - H(r|m,a_prev) (must be >= 0).
  double bijection_residual = 0.0;
  double chain_rule_residual = 0.0;
  double elimination_residual = 0.0;
  double conditioning_gap = 0.0;
  // Intermediate quantities for reporting.
  double h_r_given_aprev = 0.0;
  double h_r_given_m = 0.0;
  double h_r_given_m_aprev = 0.0;
  double h_r = 0.0;
};

TheoremCheck verify_theorem1(const DiscreteJoint& joint, double tolerance = 1e-9);

/// Dirichlet(concentration) table of size M x A x A, deterministic per seed.
DiscreteJoint random_joint(int m_size, int a_size, double concentration, std::uint64_t seed);

}  // namespace copycat::mi
