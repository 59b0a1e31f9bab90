#pragma once

// Finite-difference cases for every differentiable op. Each op output is
// contracted with fixed random weights.

#include <functional>
#include <ostream>
#include <utility>
#include <vector>

#include "gradcheck.hpp"
#include "synfuse/attention.hpp"

namespace synfuse::numcheck {

struct OpCase {
  const char* name;
  std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(Rng&)> make;
  double tolerance;
};

inline void PrintTo(const OpCase& c, std::ostream* os) { *os << c.name; }

inline std::vector<OpCase> op_cases() {
  using Inputs = std::vector<Tensor>;
  using Made = std::pair<std::function<Tensor()>, Inputs>;
  return {
      {"matmul", [](Rng& rng) -> Made {
         Tensor a = random_tensor({4, 5}, rng), b = random_tensor({5, 3}, rng);
         return {[=] { return contract(matmul(a, b), 11); }, {a, b}};
       }, 1e-6},
      {"matmul_transposed", [](Rng& rng) -> Made {
         Tensor a = random_tensor({4, 5}, rng), b = random_tensor({3, 5}, rng);
         return {[=] { return contract(matmul_transposed(a, b), 12); }, {a, b}};
       }, 1e-6},
      {"add", [](Rng& rng) -> Made {
         Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
         return {[=] { return contract(add(a, b), 13); }, {a, b}};
       }, 1e-6},
      {"add_row_broadcast", [](Rng& rng) -> Made {
         Tensor a = random_tensor({3, 4}, rng), b = random_tensor({1, 4}, rng);
         return {[=] { return contract(add(a, b), 14); }, {a, b}};
       }, 1e-6},
      {"mul", [](Rng& rng) -> Made {
         Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
         return {[=] { return contract(mul(a, b), 15); }, {a, b}};
       }, 1e-6},
      {"scale", [](Rng& rng) -> Made {
         Tensor a = random_tensor({3, 4}, rng);
         return {[=] { return contract(scale(a, -1.7), 16); }, {a}};
       }, 1e-6},
      {"transpose", [](Rng& rng) -> Made {
         Tensor a = random_tensor({3, 4}, rng);
         return {[=] { return contract(transpose(a), 17); }, {a}};
       }, 1e-6},
      {"concat_axis1", [](Rng& rng) -> Made {
         Tensor a = random_tensor({2, 4}, rng), b = random_tensor({2, 1}, rng);
         return {[=] { return contract(concat(a, b, 1), 18); }, {a, b}};
       }, 1e-6},
      {"concat_axis0", [](Rng& rng) -> Made {
         Tensor a = random_tensor({2, 3}, rng), b = random_tensor({1, 3}, rng);
         return {[=] { return contract(concat(a, b, 0), 19); }, {a, b}};
       }, 1e-6},
      {"row", [](Rng& rng) -> Made {
         Tensor a = random_tensor({3, 4}, rng);
         return {[=] { return contract(row(a, 1), 20); }, {a}};
       }, 1e-6},
      {"softmax", [](Rng& rng) -> Made {
         Tensor a = random_tensor({3, 7}, rng, -2, 2);
         return {[=] { return contract(softmax(a, 1), 21); }, {a}};
       }, 1e-6},
      {"softmax_axis0", [](Rng& rng) -> Made {
         Tensor a = random_tensor({4, 3}, rng, -2, 2);
         return {[=] { return contract(softmax(a, 0), 22); }, {a}};
       }, 1e-6},
      {"masked_fill", [](Rng& rng) -> Made {
         Tensor a = random_tensor({3, 3}, rng);
         return {[=] {
           const std::vector<unsigned char> mask = {0, 1, 1, 0, 0, 1, 0, 0, 0};
           return contract(softmax(masked_fill(a, mask, -1e9)), 23);
         }, {a}};
       }, 1e-6},
      {"layer_norm", [](Rng& rng) -> Made {
         Tensor x = random_tensor({3, 6}, rng, -2, 2), g = random_tensor({1, 6}, rng, 0.5, 1.5),
                b = random_tensor({1, 6}, rng);
         return {[=] { return contract(layer_norm(x, g, b), 24); }, {x, g, b}};
       }, 1e-6},
      {"relu", [](Rng& rng) -> Made {
         // keep entries away from the kink so central differences stay one-sided-free
         std::vector<double> v(12);
         for (auto& e : v) e = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.1, 1.0);
         Tensor a({3, 4}, v, true);
         return {[=] { return contract(relu(a), 25); }, {a}};
       }, 1e-6},
      {"dropout", [](Rng& rng) -> Made {
         Tensor a = random_tensor({4, 4}, rng);
         return {[=] {
           Rng fixed(77);
           return contract(dropout(a, 0.25, true, fixed), 26);
         }, {a}};
       }, 1e-6},
      {"embedding_lookup", [](Rng& rng) -> Made {
         Tensor t = random_tensor({5, 3}, rng);
         return {[=] { return contract(embedding_lookup(t, std::vector<int>{4, 1, 4, 0}), 27); }, {t}};
       }, 1e-6},
      {"sum", [](Rng& rng) -> Made {
         Tensor a = random_tensor({2, 5}, rng);
         return {[=] { return scale(sum(a), 0.3); }, {a}};
       }, 1e-6},
      {"cross_entropy_smoothed", [](Rng& rng) -> Made {
         Tensor l = random_tensor({2, 6}, rng, -2, 2);
         return {[=] { return cross_entropy_label_smoothed(l, std::vector<int>{3, 0}, 0.1); }, {l}};
       }, 1e-6},
      {"cross_entropy_pad_sum", [](Rng& rng) -> Made {
         Tensor l = random_tensor({3, 5}, rng, -2, 2);
         return {[=] {
           return cross_entropy_label_smoothed(l, std::vector<int>{3, 0, 1}, 0.2, 0, Reduction::sum);
         }, {l}};
       }, 1e-6},
      {"attention", [](Rng& rng) -> Made {
         Tensor h = random_tensor({4, 6}, rng), k = random_tensor({6, 3}, rng), q = random_tensor({6, 3}, rng),
                v = random_tensor({6, 3}, rng);
         return {[=] { return contract(attention(h, k, q, v).output, 28); }, {h, k, q, v}};
       }, 1e-6},
      {"attention_causal", [](Rng& rng) -> Made {
         Tensor h = random_tensor({4, 6}, rng), k = random_tensor({6, 3}, rng), q = random_tensor({6, 3}, rng),
                v = random_tensor({6, 3}, rng);
         return {[=] {
           const AttentionMask m = AttentionMask::causal(4);
           return contract(attention(h, k, q, v, &m).output, 29);
         }, {h, k, q, v}};
       }, 1e-6},
  };
}

}  // namespace synfuse::numcheck
