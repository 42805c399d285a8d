#include "transmpc/policy.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "transmpc/checkpoint.hpp"
#include "transmpc/rng.hpp"

namespace transmpc {

namespace {

using ad::Tensor;

Tensor uniform_tensor(ad::Shape shape, std::size_t fan_in, double gain,
                      Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const double s = gain / std::sqrt(static_cast<double>(fan_in));
  for (double& x : t.data) x = s * rng.uniform(-1.0, 1.0);
  return t;
}

// Per-field normalized features. Positions and headings are expressed in the
// body frame of the current state (translation- and rotation-invariant);
// speeds divide by the nominal.
std::vector<double> state_features(const std::vector<double>& x,
                                   const NormSpec& n) {
  const double phi = x[static_cast<std::size_t>(n.layout.i_phi)];
  const double c = std::cos(phi), s = std::sin(phi);
  std::vector<double> f(x.size());
  for (int i = 0; i < static_cast<int>(x.size()); ++i) {
    const double v = x[static_cast<std::size_t>(i)];
    if (i == n.layout.i_px || i == n.layout.i_py || i == n.layout.i_phi)
      f[static_cast<std::size_t>(i)] = 0.0;  // the frame origin
    else if (i == n.layout.i_v || i == n.layout.i_vlat)
      f[static_cast<std::size_t>(i)] = v / n.v_nom;
    else f[static_cast<std::size_t>(i)] = v;
  }
  if (n.layout.i_obsdx >= 0) {
    const double dx = x[static_cast<std::size_t>(n.layout.i_obsdx)];
    const double dy = x[static_cast<std::size_t>(n.layout.i_obsdy)];
    f[static_cast<std::size_t>(n.layout.i_obsdx)] =
        (c * dx + s * dy) / n.pos_scale;
    f[static_cast<std::size_t>(n.layout.i_obsdy)] =
        (-s * dx + c * dy) / n.pos_scale;
  }
  return f;
}

std::vector<double> ref_features(const std::vector<double>& x,
                                 const RefWindow& refs, const NormSpec& n) {
  const double px = x[static_cast<std::size_t>(n.layout.i_px)];
  const double py = x[static_cast<std::size_t>(n.layout.i_py)];
  const double phi = x[static_cast<std::size_t>(n.layout.i_phi)];
  const double c = std::cos(phi), s = std::sin(phi);
  std::vector<double> f;
  f.reserve(refs.size() * 4);
  for (const auto& r : refs.rows) {
    const double dx = r[0] - px, dy = r[1] - py;
    f.push_back((c * dx + s * dy) / n.pos_scale);
    f.push_back((-s * dx + c * dy) / n.pos_scale);
    f.push_back(wrap_angle(r[2] - phi));
    f.push_back(r[3] / n.v_nom);
  }
  return f;
}

// u = center + half * tanh(raw), elementwise per action dimension.
Tensor squash(const Tensor& raw, const ActionBounds& bounds) {
  const std::size_t rows = raw.rows(), cols = raw.cols();
  std::vector<double> center(rows * cols), half(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      center[i * cols + j] = 0.5 * (bounds.hi[j] + bounds.lo[j]);
      half[i * cols + j] = 0.5 * (bounds.hi[j] - bounds.lo[j]);
    }
  return ad::add(ad::mul(ad::tanh(raw), Tensor(raw.shape, half)),
                 Tensor(raw.shape, center));
}

}  // namespace

ad::Tensor& PolicyParams::at(const std::string& name) {
  for (auto& [n, t] : tensors)
    if (n == name) return t;
  throw ad::ShapeError("policy params: no tensor named " + name);
}

const ad::Tensor& PolicyParams::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw ad::ShapeError("policy params: no tensor named " + name);
}

std::size_t PolicyParams::total_params() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

PolicyParams init_params(const PolicyHyper& hyper, std::uint64_t seed) {
  if (hyper.d_embed < 1 || hyper.n_heads < 1 || hyper.n_layers < 0 ||
      hyper.d_ffn < 1 || hyper.n_state < 1 || hyper.n_ref < 1 ||
      hyper.n_input < 1 || hyper.N_max < 1)
    throw ad::ShapeError("init_params: invalid hyperparameters");
  if (hyper.d_embed % hyper.n_heads != 0)
    throw ad::ShapeError("init_params: d_embed must be divisible by n_heads");

  Rng rng(seed);
  PolicyParams p;
  p.hyper = hyper;
  const auto d = static_cast<std::size_t>(hyper.d_embed);
  const auto dff = static_cast<std::size_t>(hyper.d_ffn);
  const auto ns = static_cast<std::size_t>(hyper.n_state);
  const auto nr = static_cast<std::size_t>(hyper.n_ref);
  const auto ni = static_cast<std::size_t>(hyper.n_input);

  auto push = [&](const std::string& name, Tensor t) {
    p.tensors.emplace_back(name, std::move(t));
  };

  if (hyper.arch == PolicyArch::kTransformer) {
    push("embed_state.w", uniform_tensor({ns, d}, ns, 1.0, rng));
    push("embed_state.b", Tensor::zeros({d}));
    push("embed_ref.w", uniform_tensor({nr, d}, nr, 1.0, rng));
    push("embed_ref.b", Tensor::zeros({d}));
    for (int l = 0; l < hyper.n_layers; ++l) {
      const std::string pre = "layer" + std::to_string(l) + ".";
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv"})
        push(pre + w, uniform_tensor({d, d}, d, 1.0, rng));
      // residual branches start near identity: the block output projections
      // get a reduced gain, which cuts the convergence spread across seeds
      push(pre + "attn.wo", uniform_tensor({d, d}, d, 0.25, rng));
      for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
        push(pre + b, Tensor::zeros({d}));
      push(pre + "ln1.g", Tensor::full({d}, 1.0));
      push(pre + "ln1.b", Tensor::zeros({d}));
      push(pre + "ffn.w1", uniform_tensor({d, dff}, d, 1.0, rng));
      push(pre + "ffn.b1", Tensor::zeros({dff}));
      push(pre + "ffn.w2", uniform_tensor({dff, d}, dff, 0.25, rng));
      push(pre + "ffn.b2", Tensor::zeros({d}));
      push(pre + "ln2.g", Tensor::full({d}, 1.0));
      push(pre + "ln2.b", Tensor::zeros({d}));
    }
    // small decoder gain keeps initial actions near the bound centers while
    // leaving the reference tokens measurably coupled to every output
    push("decoder.w", uniform_tensor({d, ni}, d, 0.1, rng));
    push("decoder.b", Tensor::zeros({ni}));
    return p;
  }

  // MLP baseline
  if (hyper.mlp_width < 1 || hyper.mlp_horizon < 1)
    throw ad::ShapeError("init_params: invalid MLP hyperparameters");
  const auto w = static_cast<std::size_t>(hyper.mlp_width);
  const auto in =
      ns + nr * static_cast<std::size_t>(hyper.mlp_horizon);
  const auto out = ni * static_cast<std::size_t>(hyper.mlp_horizon);
  push("mlp.l1.w", uniform_tensor({in, w}, in, 1.0, rng));
  push("mlp.l1.b", Tensor::zeros({w}));
  push("mlp.l2.w", uniform_tensor({w, w}, w, 1.0, rng));
  push("mlp.l2.b", Tensor::zeros({w}));
  push("mlp.l3.w", uniform_tensor({w, w}, w, 1.0, rng));
  push("mlp.l3.b", Tensor::zeros({w}));
  push("mlp.head.w", uniform_tensor({w, out}, w, 0.1, rng));
  push("mlp.head.b", Tensor::zeros({out}));
  return p;
}

ad::Tensor positional_encoding(std::size_t n_tokens, std::size_t d_embed) {
  Tensor pe = Tensor::zeros({n_tokens, d_embed});
  for (std::size_t pos = 0; pos < n_tokens; ++pos)
    for (std::size_t j = 0; j < d_embed; ++j) {
      const double expo =
          static_cast<double>(2 * (j / 2)) / static_cast<double>(d_embed);
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, expo);
      pe.data[pos * d_embed + j] = (j % 2 == 0) ? std::sin(angle)
                                                : std::cos(angle);
    }
  return pe;
}

PolicyParams stage_on_tape(const PolicyParams& params, ad::Tape& tape) {
  PolicyParams staged;
  staged.hyper = params.hyper;
  staged.tensors.reserve(params.tensors.size());
  for (const auto& [name, t] : params.tensors)
    staged.tensors.emplace_back(name, tape.leaf(t));
  return staged;
}

ad::Tensor policy_forward(const std::vector<double>& state,
                          const RefWindow& refs, const PolicyParams& params,
                          const ActionBounds& bounds, const NormSpec& norm) {
  const PolicyHyper& h = params.hyper;
  const std::size_t n = refs.size();
  if (n == 0) throw ad::ShapeError("policy_forward: N must be >= 1");
  if (static_cast<int>(state.size()) != h.n_state)
    throw ad::ShapeError("policy_forward: state dimension mismatch");

  const auto d = static_cast<std::size_t>(h.d_embed);
  const Tensor sf =
      Tensor::matrix(1, static_cast<std::size_t>(h.n_state),
                     state_features(state, norm));
  const Tensor rf = Tensor::matrix(n, 4, ref_features(state, refs, norm));

  const Tensor state_tok =
      ad::row_add(ad::matmul(sf, params.at("embed_state.w")),
                  params.at("embed_state.b"));
  const Tensor ref_toks = ad::row_add(
      ad::matmul(rf, params.at("embed_ref.w")), params.at("embed_ref.b"));
  Tensor hdn = ad::add(ad::concat({state_tok, ref_toks}, 0),
                       positional_encoding(n + 1, d));

  const std::size_t n_heads = static_cast<std::size_t>(h.n_heads);
  const std::size_t hd = d / n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t tokens = n + 1;

  for (int l = 0; l < h.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    const Tensor q = ad::row_add(ad::matmul(hdn, params.at(pre + "attn.wq")),
                                 params.at(pre + "attn.bq"));
    const Tensor k = ad::row_add(ad::matmul(hdn, params.at(pre + "attn.wk")),
                                 params.at(pre + "attn.bk"));
    const Tensor v = ad::row_add(ad::matmul(hdn, params.at(pre + "attn.wv")),
                                 params.at(pre + "attn.bv"));
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (std::size_t hh = 0; hh < n_heads; ++hh) {
      const std::size_t c0 = hh * hd, c1 = (hh + 1) * hd;
      const Tensor qh = ad::slice(q, 0, tokens, c0, c1);
      const Tensor kh = ad::slice(k, 0, tokens, c0, c1);
      const Tensor vh = ad::slice(v, 0, tokens, c0, c1);
      // unmasked bidirectional attention
      const Tensor scores =
          ad::scale(ad::matmul(qh, ad::transpose(kh)), att_scale);
      heads.push_back(ad::matmul(ad::softmax(scores), vh));
    }
    const Tensor att =
        ad::row_add(ad::matmul(ad::concat(heads, 1),
                               params.at(pre + "attn.wo")),
                    params.at(pre + "attn.bo"));
    hdn = ad::layer_norm(ad::add(hdn, att), params.at(pre + "ln1.g"),
                         params.at(pre + "ln1.b"));
    const Tensor ff = ad::row_add(
        ad::matmul(
            ad::tanh(ad::row_add(ad::matmul(hdn, params.at(pre + "ffn.w1")),
                                 params.at(pre + "ffn.b1"))),
            params.at(pre + "ffn.w2")),
        params.at(pre + "ffn.b2"));
    hdn = ad::layer_norm(ad::add(hdn, ff), params.at(pre + "ln2.g"),
                         params.at(pre + "ln2.b"));
  }

  // drop the state token's output; decode the reference positions
  const Tensor z = ad::slice(hdn, 1, tokens, 0, d);
  const Tensor raw = ad::row_add(ad::matmul(z, params.at("decoder.w")),
                                 params.at("decoder.b"));
  return squash(raw, bounds);
}

ad::Tensor mlp_policy_forward(const std::vector<double>& state,
                              const RefWindow& refs,
                              const PolicyParams& params,
                              const ActionBounds& bounds,
                              const NormSpec& norm) {
  const PolicyHyper& h = params.hyper;
  if (static_cast<int>(refs.size()) != h.mlp_horizon)
    throw ad::ShapeError(
        "mlp_policy_forward: horizon differs from the trained shape (N=" +
        std::to_string(h.mlp_horizon) + ")");
  if (static_cast<int>(state.size()) != h.n_state)
    throw ad::ShapeError("mlp_policy_forward: state dimension mismatch");

  std::vector<double> flat = state_features(state, norm);
  const std::vector<double> rf = ref_features(state, refs, norm);
  flat.insert(flat.end(), rf.begin(), rf.end());

  Tensor hdn = Tensor::matrix(1, flat.size(), flat);
  for (const char* layer : {"mlp.l1.", "mlp.l2.", "mlp.l3."}) {
    const std::string pre(layer);
    hdn = ad::tanh(ad::row_add(ad::matmul(hdn, params.at(pre + "w")),
                               params.at(pre + "b")));
  }
  const Tensor raw_flat = ad::row_add(
      ad::matmul(hdn, params.at("mlp.head.w")), params.at("mlp.head.b"));
  const Tensor raw = ad::reshape(
      raw_flat, {refs.size(), static_cast<std::size_t>(h.n_input)});
  return squash(raw, bounds);
}

ad::Tensor Policy::forward(const std::vector<double>& state,
                           const RefWindow& refs) const {
  return params.hyper.arch == PolicyArch::kTransformer
             ? policy_forward(state, refs, params, bounds, norm)
             : mlp_policy_forward(state, refs, params, bounds, norm);
}

std::vector<double> Policy::act(const std::vector<double>& state,
                                const RefWindow& refs) const {
  const Tensor u = forward(state, refs);
  const std::size_t m = u.cols();
  return std::vector<double>(u.data.begin(), u.data.begin() + m);
}

std::string policy_meta_json(const Policy& policy) {
  nlohmann::json meta;
  const PolicyHyper& h = policy.params.hyper;
  meta["hyper"] = {
      {"arch", h.arch == PolicyArch::kTransformer ? "transformer" : "mlp"},
      {"d_embed", h.d_embed},   {"n_heads", h.n_heads},
      {"n_layers", h.n_layers}, {"d_ffn", h.d_ffn},
      {"n_state", h.n_state},   {"n_ref", h.n_ref},
      {"n_input", h.n_input},   {"N_max", h.N_max},
      {"mlp_width", h.mlp_width}, {"mlp_horizon", h.mlp_horizon}};
  meta["bounds"] = {{"lo", policy.bounds.lo}, {"hi", policy.bounds.hi}};
  meta["norm"] = {{"pos_scale", policy.norm.pos_scale},
                  {"v_nom", policy.norm.v_nom},
                  {"layout",
                   {policy.norm.layout.i_px, policy.norm.layout.i_py,
                    policy.norm.layout.i_phi, policy.norm.layout.i_v,
                    policy.norm.layout.i_vlat, policy.norm.layout.i_omega,
                    policy.norm.layout.i_obsdx, policy.norm.layout.i_obsdy}}};
  return meta.dump();
}

Policy policy_from_parts(
    const std::string& meta_json,
    const std::vector<std::pair<std::string, ad::Tensor>>& tensors) {
  const nlohmann::json meta = nlohmann::json::parse(meta_json);
  const auto& hj = meta.at("hyper");

  Policy policy;
  PolicyHyper h;
  h.arch = hj.at("arch").get<std::string>() == "mlp" ? PolicyArch::kMlp
                                                     : PolicyArch::kTransformer;
  h.d_embed = hj.at("d_embed").get<int>();
  h.n_heads = hj.at("n_heads").get<int>();
  h.n_layers = hj.at("n_layers").get<int>();
  h.d_ffn = hj.at("d_ffn").get<int>();
  h.n_state = hj.at("n_state").get<int>();
  h.n_ref = hj.at("n_ref").get<int>();
  h.n_input = hj.at("n_input").get<int>();
  h.N_max = hj.at("N_max").get<int>();
  h.mlp_width = hj.at("mlp_width").get<int>();
  h.mlp_horizon = hj.at("mlp_horizon").get<int>();
  policy.params.hyper = h;
  policy.params.tensors = tensors;

  policy.bounds.lo = meta.at("bounds").at("lo").get<std::vector<double>>();
  policy.bounds.hi = meta.at("bounds").at("hi").get<std::vector<double>>();
  policy.norm.pos_scale = meta.at("norm").at("pos_scale").get<double>();
  policy.norm.v_nom = meta.at("norm").at("v_nom").get<double>();
  const auto lay = meta.at("norm").at("layout").get<std::vector<int>>();
  policy.norm.layout = {lay[0], lay[1], lay[2], lay[3],
                        lay[4], lay[5], lay[6], lay[7]};
  return policy;
}

void save_policy(const Policy& policy, const std::string& path) {
  Checkpoint ckpt;
  ckpt.entries = policy.params.tensors;
  ckpt.meta_json = policy_meta_json(policy);
  save_checkpoint(ckpt, path);
}

Policy load_policy(const std::string& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  return policy_from_parts(ckpt.meta_json, ckpt.entries);
}

}  // namespace transmpc
