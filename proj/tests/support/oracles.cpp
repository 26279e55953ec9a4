#include "oracles.hpp"

#include <algorithm>
#include <cmath>

#include "star/model.hpp"

namespace star::oracle {

namespace {

double weight(std::size_t j) { return std::sin(1.3 * static_cast<double>(j) + 0.5) + 0.1; }

// Weighted sum of all output entries, so every output element matters.
ad::Var<double> reduce(ad::Tape<double>& tape, const ad::Var<double>& out) {
  if (out.value().size() == 1) return out;
  Tensor<double> w(out.shape());
  for (std::size_t j = 0; j < w.size(); ++j) w[j] = weight(j);
  return ad::sum(ad::mul(out, tape.constant(std::move(w))));
}

double evaluate(const Graph& graph, const std::vector<Tensor<double>>& inputs) {
  ad::Tape<double> tape(false);
  std::vector<ad::Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  return reduce(tape, graph(tape, vars)).value()[0];
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Values bounded away from zero, for operators with a kink there.
Tensor<double> off_kink(Rng& rng, Shape shape) {
  auto t = random_tensor(rng, std::move(shape), 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data) v = sign(rng) ? v : -v;
  return t;
}

GradientCase simple(std::string name, std::function<std::vector<Tensor<double>>(Rng&)> make, Graph graph) {
  return {std::move(name), [make = std::move(make), graph = std::move(graph)](Rng& rng) {
            return max_gradient_error(graph, make(rng));
          }};
}

GradientCase matmul_case(bool ta, bool tb) {
  std::string name = std::string("matmul") + (ta ? "_ta" : "") + (tb ? "_tb" : "");
  return {name, [ta, tb](Rng& rng) {
            const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
            const Shape sa = ta ? Shape{k, m} : Shape{m, k};
            const Shape sb = tb ? Shape{n, k} : Shape{k, n};
            return max_gradient_error(
                [ta, tb](ad::Tape<double>&, const auto& v) { return ad::matmul(v[0], v[1], ta, tb); },
                {random_tensor(rng, sa), random_tensor(rng, sb)});
          }};
}

}  // namespace

Tensor<double> random_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data) v = u(rng);
  return t;
}

double max_gradient_error(const Graph& graph, const std::vector<Tensor<double>>& inputs, double eps) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
  const auto loss = reduce(tape, graph(tape, leaves));
  tape.backward(loss);

  double worst = 0;
  auto probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto analytic = leaves[i].grad();
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double x0 = inputs[i][j];
      probe[i][j] = x0 + eps;
      const double up = evaluate(graph, probe);
      probe[i][j] = x0 - eps;
      const double down = evaluate(graph, probe);
      probe[i][j] = x0;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

std::vector<GradientCase> operator_cases() {
  using Inputs = std::vector<Tensor<double>>;
  std::vector<GradientCase> cases;
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) cases.push_back(matmul_case(ta, tb));
  }
  auto two_same = [](Rng& rng) {
    const Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
    return Inputs{random_tensor(rng, s), random_tensor(rng, s)};
  };
  auto one_matrix = [](Rng& rng) { return Inputs{random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 5)})}; };

  cases.push_back(simple("add", two_same, [](auto&, const auto& v) { return ad::add(v[0], v[1]); }));
  cases.push_back(simple(
      "add_broadcast",
      [](Rng& rng) {
        const std::size_t r = pick(rng, 1, 4), c = pick(rng, 1, 5);
        return Inputs{random_tensor(rng, {r, c}), random_tensor(rng, {c})};
      },
      [](auto&, const auto& v) { return ad::add(v[0], v[1]); }));
  cases.push_back(simple("sub", two_same, [](auto&, const auto& v) { return ad::sub(v[0], v[1]); }));
  cases.push_back(simple("mul", two_same, [](auto&, const auto& v) { return ad::mul(v[0], v[1]); }));
  cases.push_back({"scale", [one_matrix](Rng& rng) {
                     const double f = std::uniform_real_distribution<double>(-2, 2)(rng);
                     return max_gradient_error([f](auto&, const auto& v) { return ad::scale(v[0], f); },
                                               one_matrix(rng));
                   }});
  cases.push_back(simple(
      "sigmoid", [](Rng& rng) { return Inputs{random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 5)}, -4, 4)}; },
      [](auto&, const auto& v) { return ad::sigmoid(v[0]); }));
  cases.push_back(simple(
      "relu", [](Rng& rng) { return Inputs{off_kink(rng, {pick(rng, 1, 4), pick(rng, 1, 5)})}; },
      [](auto&, const auto& v) { return ad::relu(v[0]); }));
  cases.push_back(simple(
      "softmax", [](Rng& rng) { return Inputs{random_tensor(rng, {pick(rng, 1, 4), pick(rng, 1, 6)}, -3, 3)}; },
      [](auto&, const auto& v) { return ad::softmax(v[0]); }));
  cases.push_back(simple(
      "layernorm",
      [](Rng& rng) {
        const std::size_t r = pick(rng, 1, 4), c = pick(rng, 2, 6);
        return Inputs{random_tensor(rng, {r, c}, -2, 2), random_tensor(rng, {c}, 0.5, 1.5), random_tensor(rng, {c})};
      },
      [](auto&, const auto& v) { return ad::layernorm(v[0], v[1], v[2]); }));
  cases.push_back({"embed", [](Rng& rng) {
                     const std::size_t vocab = pick(rng, 2, 6), d = pick(rng, 1, 4), n = pick(rng, 1, 6);
                     std::vector<int> ids(n);
                     for (auto& id : ids) id = static_cast<int>(pick(rng, 0, vocab - 1));
                     return max_gradient_error([ids](auto&, const auto& v) { return ad::embed(v[0], ids); },
                                               {random_tensor(rng, {vocab, d})});
                   }});
  cases.push_back({"cross_entropy", [](Rng& rng) {
                     const std::size_t rows = pick(rng, 1, 5), classes = pick(rng, 2, 6);
                     std::vector<int> targets(rows);
                     for (auto& t : targets) t = static_cast<int>(pick(rng, 0, classes - 1));
                     targets[0] = static_cast<int>(pick(rng, 1, classes - 1));  // at least one counted row
                     return max_gradient_error(
                         [targets](auto&, const auto& v) { return ad::cross_entropy(v[0], targets, 0); },
                         {random_tensor(rng, {rows, classes}, -3, 3)});
                   }});
  cases.push_back(simple(
      "concat_rows",
      [](Rng& rng) {
        const std::size_t c = pick(rng, 1, 4);
        return Inputs{random_tensor(rng, {pick(rng, 1, 3), c}), random_tensor(rng, {pick(rng, 1, 3), c})};
      },
      [](auto&, const auto& v) {
        std::vector<ad::Var<double>> parts{v[0], v[1]};
        return ad::concat<double>(parts, 0);
      }));
  cases.push_back(simple(
      "concat_cols",
      [](Rng& rng) {
        const std::size_t r = pick(rng, 1, 4);
        return Inputs{random_tensor(rng, {r, pick(rng, 1, 3)}), random_tensor(rng, {r, pick(rng, 1, 3)})};
      },
      [](auto&, const auto& v) {
        std::vector<ad::Var<double>> parts{v[0], v[1]};
        return ad::concat<double>(parts, -1);
      }));
  cases.push_back({"mask_add", [](Rng& rng) {
                     const std::size_t r = pick(rng, 1, 4), c = pick(rng, 2, 5);
                     std::vector<std::uint8_t> visible(r * c);
                     for (std::size_t i = 0; i < r; ++i) {
                       for (std::size_t j = 0; j < c; ++j) visible[i * c + j] = j == 0 || pick(rng, 0, 1) == 1;
                     }
                     return max_gradient_error(
                         [visible](auto&, const auto& v) { return ad::softmax(ad::mask_add<double>(v[0], visible)); },
                         {random_tensor(rng, {r, c}, -2, 2)});
                   }});
  cases.push_back(simple("sum", one_matrix, [](auto&, const auto& v) { return ad::sum(v[0]); }));
  cases.push_back({"slice_cols", [](Rng& rng) {
                     const std::size_t c = pick(rng, 2, 6);
                     const std::size_t start = pick(rng, 0, c - 1);
                     const std::size_t count = pick(rng, 1, c - start);
                     return max_gradient_error(
                         [start, count](auto&, const auto& v) { return ad::slice_cols(v[0], start, count); },
                         {random_tensor(rng, {pick(rng, 1, 4), c})});
                   }});
  cases.push_back({"gather_rows", [](Rng& rng) {
                     const std::size_t r = pick(rng, 1, 5);
                     std::vector<std::size_t> idx(pick(rng, 1, 6));
                     for (auto& i : idx) i = pick(rng, 0, r - 1);
                     const bool vector_input = pick(rng, 0, 1) == 1;
                     const Shape s = vector_input ? Shape{r} : Shape{r, pick(rng, 1, 4)};
                     return max_gradient_error(
                         [idx](auto&, const auto& v) { return ad::gather_rows<double>(v[0], idx); },
                         {random_tensor(rng, s)});
                   }});
  cases.push_back(simple(
      "reshape", [](Rng& rng) { return Inputs{random_tensor(rng, {pick(rng, 1, 4), 6})}; },
      [](auto&, const auto& v) {
        const std::size_t rows = v[0].value().rows();
        return ad::reshape(v[0], Shape{rows * 2, 3});
      }));
  cases.push_back(simple(
      "mlp",
      [](Rng& rng) {
        const std::size_t n = pick(rng, 1, 4), d = pick(rng, 2, 4), h = pick(rng, 2, 5);
        return Inputs{random_tensor(rng, {n, d}), random_tensor(rng, {d, h}), random_tensor(rng, {h}, 0.2, 0.6),
                      random_tensor(rng, {h, 1}), random_tensor(rng, {1})};
      },
      [](auto&, const auto& v) {
        const auto hidden = ad::relu(ad::add(ad::matmul(v[0], v[1]), v[2]));
        return ad::add(ad::matmul(hidden, v[3]), v[4]);
      }));

  // Segmentation operators used in training.
  cases.push_back({"rescale", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 8), ty = pick(rng, 1, 4);
                     return max_gradient_error(
                         [ty](auto&, const auto& v) { return seg::rescale(v[0], ty, 1.0); },
                         {random_tensor(rng, {n}, 0.05, 1.0)});
                   }});
  cases.push_back({"length_penalty", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 8), ty = pick(rng, 1, 5);
                     return max_gradient_error([ty](auto&, const auto& v) { return seg::length_penalty(v[0], ty); },
                                               {random_tensor(rng, {n}, 0.0, 1.0)});
                   }});
  cases.push_back({"cif_weights", [](Rng& rng) {
                     const std::size_t n = pick(rng, 6, 12), d = pick(rng, 1, 3);
                     return max_gradient_error(
                         [](auto&, const auto& v) {
                           const auto w = seg::cif_weights(v[0], 1.0, seg::TailRule::FireIfHalf);
                           return ad::matmul(w, v[1]);
                         },
                         {random_tensor(rng, {n}, 0.2, 0.9), random_tensor(rng, {n, d})});
                   }});
  cases.push_back({"conv1d", [](Rng& rng) {
                     const std::size_t kernel = pick(rng, 1, 3), stride = pick(rng, 1, 2);
                     const std::size_t d = pick(rng, 1, 3), out = pick(rng, 1, 3);
                     const std::size_t frames = pick(rng, kernel, kernel + 5);
                     return max_gradient_error(
                         [kernel, stride](auto&, const auto& v) { return seg::conv1d(v[0], v[1], v[2], kernel, stride); },
                         {random_tensor(rng, {frames, d}), random_tensor(rng, {kernel * d, out}), random_tensor(rng, {out})});
                   }});
  return cases;
}

InjectionCheck injection_identity_trial(Rng& rng) {
  model::ModelConfig cfg;
  cfg.d_in = 3;
  cfg.d = 4;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.heads = 1;
  cfg.ffn = 8;
  cfg.vocab = 6;
  cfg.max_positions = 16;
  cfg.max_target = 16;
  const model::Model<double> m(cfg, rng());
  const std::size_t k = 3;
  const auto z = random_tensor(rng, {k, cfg.d});
  const auto s = random_tensor(rng, {k}, -1, 1);
  const std::vector<int> inputs{model::kBos, static_cast<int>(pick(rng, 3, 5))};
  const std::vector<int> targets{inputs[1], model::kEos};

  auto loss_of = [&](ad::Tape<double>& tape, const ad::Var<double>& zv, const ad::Var<double>& sv,
                     model::CrossAttentionCapture<double>* capture) {
    model::DecoderInputs<double> in;
    in.anchors = zv;
    in.scores = sv;
    return ad::cross_entropy(m.decode(tape, inputs, in, capture), targets);
  };

  ad::Tape<double> tape;
  const auto zv = tape.constant(z);
  const auto sv = tape.leaf(s);
  model::CrossAttentionCapture<double> capture;
  tape.backward(loss_of(tape, zv, sv, &capture));
  const auto ds = sv.grad();

  InjectionCheck out;
  for (std::size_t i = 0; i < k; ++i) {
    double summed = 0;
    for (const auto& logits : capture.logits) {
      const auto g = logits.grad();
      for (std::size_t q = 0; q < g.rows(); ++q) summed += g.at(q, i);
    }
    out.identity_error = std::max(out.identity_error, std::abs(summed - ds[i]));
  }
  out.fd_error = max_gradient_error(
      [&](ad::Tape<double>& t, const std::vector<ad::Var<double>>& v) { return loss_of(t, t.constant(z), v[0], nullptr); },
      {s});
  return out;
}

CifTrace cif_scan(const std::vector<double>& alpha, double beta, bool fire_tail_if_half) {
  CifTrace out;
  double acc = 0;
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    const double before = acc;
    acc += alpha[t];
    if (acc >= beta - 1e-12) {
      out.boundaries.push_back(t);
      out.left.push_back(beta - before);
      const double residual = std::max(0.0, acc - beta);
      out.right.push_back(residual);
      acc = residual;
    }
  }
  out.tail_mass = acc;
  const bool last_fired = !out.boundaries.empty() && out.boundaries.back() + 1 == alpha.size();
  if (fire_tail_if_half && !alpha.empty() && acc >= beta / 2 && !last_fired) {
    out.boundaries.push_back(alpha.size() - 1);
    out.left.push_back(alpha.back());
    out.right.push_back(0);
    out.tail_fired = true;
  }
  return out;
}

Tensor<double> cif_combine(const Tensor<double>& hidden, const std::vector<double>& alpha, const CifTrace& trace) {
  const std::size_t d = hidden.cols();
  Tensor<double> out = Tensor<double>::matrix(trace.boundaries.size(), d);
  for (std::size_t m = 0; m < trace.boundaries.size(); ++m) {
    const std::size_t end = trace.boundaries[m];
    const bool has_prev = m > 0;
    const std::size_t start = has_prev ? trace.boundaries[m - 1] : 0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = 0;
      if (has_prev) c += trace.right[m - 1] * hidden.at(start, j);
      for (std::size_t t = has_prev ? start + 1 : 0; t < end; ++t) c += alpha[t] * hidden.at(t, j);
      c += trace.left[m] * hidden.at(end, j);
      out.at(m, j) = c;
    }
  }
  return out;
}

double dal_recursion(const std::vector<double>& delays, double total_frames) {
  const double n = static_cast<double>(delays.size());
  const double inv_gamma = total_frames / n;
  std::vector<double> adjusted(delays.size());
  double total = 0;
  for (std::size_t i = 0; i < delays.size(); ++i) {
    adjusted[i] = i == 0 ? delays[i] : std::max(delays[i], adjusted[i - 1] + inv_gamma);
    total += adjusted[i] - static_cast<double>(i) * inv_gamma;
  }
  return total / n;
}

std::vector<double> delays_from_segments(const std::vector<std::size_t>& lengths, std::size_t target_len) {
  std::vector<double> ends;
  double elapsed = 0;
  for (auto l : lengths) ends.push_back(elapsed += static_cast<double>(l));
  std::vector<double> delays;
  for (std::size_t i = 0; i < target_len; ++i) delays.push_back(i < ends.size() ? ends[i] : ends.back());
  return delays;
}

}  // namespace star::oracle
