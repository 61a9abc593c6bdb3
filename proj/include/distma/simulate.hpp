#pragma once

#include <cstdint>

#include "distma/data.hpp"
#include "distma/params.hpp"

namespace distma {

// SplitMix64: 64-bit-state counter generator (Steele, Lea & Flood).
// One jump per draw; identical streams on every platform. Deviates come
// from inverse-CDF or rejection methods on this stream only, so a given
// seed reproduces the same table everywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  double uniform();              // open (0,1)
  double normal();               // inverse CDF
  double gamma(double shape);    // Marsaglia-Tsang, scale 1
  double chi_sq(double df);
  double student_t(double nu);
  double beta(double a, double b);
  double skew_t(double nu, double gamma);  // two-piece standard skew-t
  long binomial(long n, double p);
  long poisson(double lambda);

  // Documented substream derivation for parallel generation.
  static uint64_t substream_seed(uint64_t seed, uint64_t stream_index);

 private:
  uint64_t state_;
};

struct SimScenario {
  Family family = Family::normal_re;
  NaturalParams truth;
  int k = 10;                  // number of studies
  int n_per_study = 1;         // rows per study (glmm / multilevel)
  int studies_per_cluster = 2; // multilevel3
  double v_lo = 0.01, v_hi = 0.1;
  bool draw_se = false;         // when set, v_lo/v_hi bound se, v = se^2
  std::vector<double> v_fixed;  // overrides the uniform law when nonempty
  double trials = 50.0;         // binomial n_ij
  double exposure = 10.0;       // poisson offset
  double within_cor = 0.3;      // multivariate true sampling correlation
  uint64_t seed = 1;
};

EffectTable sim_normal_re(const SimScenario& s);
EffectTable sim_location_scale(const SimScenario& s);
EffectTable sim_multilevel3(const SimScenario& s);
EffectTable sim_multivariate(const SimScenario& s);
EffectTable sim_glmm(const SimScenario& s);    // family picks binomial/poisson
EffectTable sim_robust(const SimScenario& s);  // family picks the RE law

// Dispatch on s.family.
EffectTable simulate_table(const SimScenario& s);

}  // namespace distma
