#include "copycat/mi_bound.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace copycat::mi {

namespace {

double plogp(double p) { return p > 0.0 ? p * std::log2(p) : 0.0; }

void check_normalized(std::span<const double> p, const char* what) {
  double total = 0.0;
  for (double x : p) {
    if (!(x >= 0.0) || !std::isfinite(x)) {
      throw NotNormalized(std::string(what) + ": negative or non-finite probability");
    }
    total += x;
  }
  if (std::abs(total - 1.0) > kNormTolerance) {
    throw NotNormalized(std::string(what) + ": probabilities sum to " + std::to_string(total));
  }
}

}  // namespace

DiscreteJoint::DiscreteJoint(int m_size, int a_size, std::vector<double> probabilities)
    : m_(m_size), a_(a_size), p_(std::move(probabilities)) {
  if (m_ < 1 || a_ < 1) throw std::invalid_argument("DiscreteJoint: empty alphabet");
  if (p_.size() != static_cast<std::size_t>(m_) * a_ * a_) {
    throw std::invalid_argument("DiscreteJoint: table size mismatch");
  }
  check_normalized(p_, "DiscreteJoint");
}

double entropy(std::span<const double> marginal) {
  check_normalized(marginal, "entropy");
  double h = 0.0;
  for (double p : marginal) h -= plogp(p);
  return std::max(h, 0.0);
}

double cond_entropy(const Eigen::MatrixXd& joint_xy) {
  check_normalized({joint_xy.data(), static_cast<std::size_t>(joint_xy.size())}, "cond_entropy");
  // H(X|Y) = -sum p(x,y) log p(x,y)/p(y)
  double h = 0.0;
  for (Eigen::Index y = 0; y < joint_xy.cols(); ++y) {
    const double py = joint_xy.col(y).sum();
    for (Eigen::Index x = 0; x < joint_xy.rows(); ++x) {
      const double pxy = joint_xy(x, y);
      if (pxy > 0.0) h -= pxy * std::log2(pxy / py);
    }
  }
  return std::max(h, 0.0);
}

double cond_mutual_info(std::span<const Eigen::MatrixXd> joint_xy_per_z) {
  double total = 0.0;
  for (const auto& t : joint_xy_per_z) total += t.sum();
  if (std::abs(total - 1.0) > kNormTolerance) {
    throw NotNormalized("cond_mutual_info: probabilities sum to " + std::to_string(total));
  }
  // I(X;Y|Z) = sum p(x,y,z) log [p(z) p(x,y,z) / (p(x,z) p(y,z))]
  double info = 0.0;
  for (const auto& t : joint_xy_per_z) {
    if ((t.array() < 0.0).any()) throw NotNormalized("cond_mutual_info: negative probability");
    const double pz = t.sum();
    const Eigen::VectorXd pxz = t.rowwise().sum();
    const Eigen::RowVectorXd pyz = t.colwise().sum();
    for (Eigen::Index x = 0; x < t.rows(); ++x) {
      for (Eigen::Index y = 0; y < t.cols(); ++y) {
        const double p = t(x, y);
        if (p > 0.0) info += p * std::log2(pz * p / (pxz(x) * pyz(y)));
      }
    }
  }
  return info;
}

TheoremCheck verify_theorem1(const DiscreteJoint& joint, double tolerance) {
  const int M = joint.m_size();
  const int A = joint.a_size();
  const int R = joint.r_size();

  // Per-a_prev slices: (m x a_cur) and (m x r).
  std::vector<Eigen::MatrixXd> m_acur(A, Eigen::MatrixXd::Zero(M, A));
  std::vector<Eigen::MatrixXd> m_r(A, Eigen::MatrixXd::Zero(M, R));
  Eigen::MatrixXd r_aprev = Eigen::MatrixXd::Zero(R, A);
  Eigen::MatrixXd m_aprev = Eigen::MatrixXd::Zero(M, A);
  Eigen::MatrixXd r_m = Eigen::MatrixXd::Zero(R, M);
  Eigen::MatrixXd r_given_pair = Eigen::MatrixXd::Zero(R, M * A);  // cols index (m, a_prev)
  std::vector<double> r_marginal(R, 0.0);
  std::vector<double> aprev_marginal(A, 0.0);

  for (int m = 0; m < M; ++m) {
    for (int ap = 0; ap < A; ++ap) {
      for (int ac = 0; ac < A; ++ac) {
        const double p = joint(m, ap, ac);
        const int r = ac - ap + A - 1;
        m_acur[ap](m, ac) += p;
        m_r[ap](m, r) += p;
        r_aprev(r, ap) += p;
        m_aprev(m, ap) += p;
        r_m(r, m) += p;
        r_given_pair(r, m * A + ap) += p;
        r_marginal[r] += p;
        aprev_marginal[ap] += p;
      }
    }
  }

  TheoremCheck c;
  c.lhs = cond_mutual_info(m_acur);
  const double mi_residual = cond_mutual_info(m_r);

  // H(m, r | a_prev) = H(m, r, a_prev) - H(a_prev)
  std::vector<double> mr_aprev;
  for (const auto& t : m_r) mr_aprev.insert(mr_aprev.end(), t.data(), t.data() + t.size());
  const double h_m_r_given_aprev = entropy(mr_aprev) - entropy(aprev_marginal);

  c.h_r_given_aprev = cond_entropy(r_aprev);
  c.h_r_given_m = cond_entropy(r_m);
  c.h_r_given_m_aprev = cond_entropy(r_given_pair);
  c.h_r = entropy(r_marginal);
  const double h_m_given_aprev = cond_entropy(m_aprev);

  const double chain = h_m_given_aprev + c.h_r_given_aprev - h_m_r_given_aprev;
  const double eliminated = c.h_r_given_aprev - c.h_r_given_m_aprev;

  c.bijection_residual = c.lhs - mi_residual;
  c.chain_rule_residual = mi_residual - chain;
  c.elimination_residual = chain - eliminated;
  c.conditioning_gap = c.h_r_given_m - c.h_r_given_m_aprev;

  c.rhs = c.h_r_given_aprev - c.h_r_given_m;
  c.slack = c.lhs - c.rhs;
  c.holds = c.slack >= -tolerance;
  return c;
}

DiscreteJoint random_joint(int m_size, int a_size, double concentration, std::uint64_t seed) {
  if (m_size < 2 || a_size < 2) throw std::invalid_argument("random_joint: need M, A >= 2");
  if (!(concentration > 0.0)) throw std::invalid_argument("random_joint: concentration > 0");
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(concentration, 1.0);
  std::vector<double> p(static_cast<std::size_t>(m_size) * a_size * a_size);
  for (double& x : p) x = gamma(rng);
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& x : p) x /= total;
  // Fold the rounding residue into the largest cell so the sum is 1 to ~1 ulp.
  const double err = 1.0 - std::accumulate(p.begin(), p.end(), 0.0);
  *std::max_element(p.begin(), p.end()) += err;
  return DiscreteJoint(m_size, a_size, std::move(p));
}

}  // namespace copycat::mi
