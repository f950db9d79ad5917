#include "support/fixtures.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <sys/wait.h>

namespace edgert::testing {

TempDir::TempDir() {
  std::string tmpl = (std::filesystem::temp_directory_path() / "edgert-XXXXXX").string();
  if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
  path_ = tmpl;
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

ArchMeta small_arch() {
  ArchMeta a;
  a.vocab_size = 64;
  a.hidden_dim = 32;
  a.n_layers = 2;
  a.n_heads = 4;
  a.n_kv_heads = 2;
  a.head_dim = 8;
  a.mlp_dim = 64;
  a.feature_tap_layers = {0, 1};
  return a;
}

Setup write_setup(const TempDir& dir, const ModelArtifact& base, const ModelArtifact* draft, std::int64_t max_seq_len) {
  Setup s;
  s.base_path = dir / "base.efmt";
  write_artifact(base, s.base_path);
  json doc = {{"prefill_artifact_path", "base.efmt"}, {"kv", {{"max_seq_len", max_seq_len}}}};
  if (draft) {
    s.draft_path = dir / "draft.efmt";
    write_artifact(*draft, s.draft_path);
    doc["draft_artifact_path"] = "draft.efmt";
  }
  s.config_path = dir / "engine.json";
  std::ofstream(s.config_path) << doc.dump(2);
  s.config = load_engine_config(s.config_path);
  return s;
}

namespace {

void zero(ModelArtifact& art, const std::string& name) {
  auto& d = art.mutable_tensor(name).data;
  std::fill(d.begin(), d.end(), 0.0f);
}

void zero_layers(ModelArtifact& art) {
  for (std::int64_t l = 0; l < art.arch.n_layers; ++l)
    for (const char* w : {"attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_up", "w_down"})
      zero(art, "layers." + std::to_string(l) + "." + w);
}

}  // namespace

std::pair<ModelArtifact, ModelArtifact> self_draft_pair(const ArchMeta& arch, std::uint64_t seed) {
  auto base = generate_reference_artifact(arch, seed);
  zero_layers(base);
  auto draft = generate_derived_draft(base, seed + 1);
  zero_layers(draft);
  zero(draft, "feature_fc");
  return {std::move(base), std::move(draft)};
}

std::pair<ModelArtifact, ModelArtifact> partial_draft_pair(const ArchMeta& arch, std::uint64_t seed) {
  auto pair = self_draft_pair(arch, seed);
  auto& w = pair.second.mutable_tensor("lm_head").data;
  for (std::int64_t v = 0; v < arch.vocab_size; v += 3)
    std::fill(w.begin() + v * arch.hidden_dim, w.begin() + (v + 1) * arch.hidden_dim, 0.0f);
  return pair;
}

ModelArtifact constant_draft(const ModelArtifact& base, std::uint64_t seed) {
  auto draft = generate_derived_draft(base, seed);
  zero(draft, "norm");
  return draft;
}

std::vector<TokenId> random_tokens(std::int64_t n, std::int64_t vocab, std::uint64_t seed) {
  Lcg64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<TokenId> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = static_cast<TokenId>(rng.next_below(static_cast<std::uint32_t>(vocab)));
  return out;
}

// ---------------------------------------------------------------------------
// double-precision oracle

namespace {

using Mat = std::vector<double>;  // row-major

Mat to_double(const std::vector<float>& v) { return Mat(v.begin(), v.end()); }

// y[t][o] = sum_i x[t][i] * w[o][i]
Mat matmul(const Mat& x, std::int64_t T, std::int64_t in, const std::vector<float>& w, std::int64_t out) {
  Mat y(static_cast<std::size_t>(T * out), 0.0);
  for (std::int64_t t = 0; t < T; ++t)
    for (std::int64_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < in; ++i) acc += x[t * in + i] * static_cast<double>(w[o * in + i]);
      y[t * out + o] = acc;
    }
  return y;
}

Mat norm_rows(const Mat& x, std::int64_t T, std::int64_t n, const std::vector<float>& w, double eps) {
  Mat y(x.size());
  for (std::int64_t t = 0; t < T; ++t) {
    double ss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) ss += x[t * n + i] * x[t * n + i];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::int64_t i = 0; i < n; ++i) y[t * n + i] = x[t * n + i] * r * w[i];
  }
  return y;
}

void rotate(Mat& x, std::int64_t T, std::int64_t heads, std::int64_t hd, double theta) {
  const auto half = hd / 2;
  for (std::int64_t t = 0; t < T; ++t)
    for (std::int64_t h = 0; h < heads; ++h) {
      double* row = x.data() + (t * heads + h) * hd;
      for (std::int64_t i = 0; i < half; ++i) {
        const double a = static_cast<double>(t) / std::pow(theta, 2.0 * static_cast<double>(i) / static_cast<double>(hd));
        const double lo = row[i], hi = row[i + half];
        row[i] = lo * std::cos(a) - hi * std::sin(a);
        row[i + half] = hi * std::cos(a) + lo * std::sin(a);
      }
    }
}

}  // namespace

std::vector<std::vector<double>> oracle_logits(const ModelArtifact& art, const std::vector<TokenId>& tokens) {
  const auto& a = art.arch;
  if (a.role != ModelRole::base) throw std::invalid_argument("oracle covers base models");
  const auto T = static_cast<std::int64_t>(tokens.size());
  const auto H = a.hidden_dim, hd = a.head_dim, nh = a.n_heads, nkv = a.n_kv_heads;
  const auto& emb = art.tensor("tok_embeddings").data;
  Mat x(static_cast<std::size_t>(T * H));
  for (std::int64_t t = 0; t < T; ++t)
    for (std::int64_t i = 0; i < H; ++i) x[t * H + i] = emb[tokens[t] * H + i];

  for (std::int64_t l = 0; l < a.n_layers; ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    auto w = [&](const char* n) -> const std::vector<float>& { return art.tensor(p + n).data; };
    const auto xn = norm_rows(x, T, H, w("attn_norm"), a.rmsnorm_eps);
    auto q = matmul(xn, T, H, w("wq"), nh * hd);
    auto k = matmul(xn, T, H, w("wk"), nkv * hd);
    const auto v = matmul(xn, T, H, w("wv"), nkv * hd);
    rotate(q, T, nh, hd, a.rope_theta);
    rotate(k, T, nkv, hd, a.rope_theta);
    Mat att(static_cast<std::size_t>(T * nh * hd), 0.0);
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t h = 0; h < nh; ++h) {
        const auto kvh = h * nkv / nh;
        std::vector<double> s(static_cast<std::size_t>(t + 1));
        double mx = -1e300;
        for (std::int64_t j = 0; j <= t; ++j) {
          double d = 0.0;
          for (std::int64_t i = 0; i < hd; ++i) d += q[(t * nh + h) * hd + i] * k[(j * nkv + kvh) * hd + i];
          s[j] = d / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::int64_t j = 0; j <= t; ++j)
          for (std::int64_t i = 0; i < hd; ++i) att[(t * nh + h) * hd + i] += s[j] / z * v[(j * nkv + kvh) * hd + i];
      }
    const auto o = matmul(att, T, nh * hd, w("wo"), H);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];
    const auto xn2 = norm_rows(x, T, H, w("mlp_norm"), a.rmsnorm_eps);
    auto up = matmul(xn2, T, H, w("w_up"), a.mlp_dim);
    for (auto& u : up)
      u = a.gelu_variant == "tanh"
              ? 0.5 * u * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (u + 0.044715 * u * u * u)))
              : 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
    const auto down = matmul(up, T, a.mlp_dim, w("w_down"), H);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += down[i];
  }
  const auto xf = norm_rows(x, T, H, art.tensor("norm").data, a.rmsnorm_eps);
  const auto logits = matmul(xf, T, H, art.tensor("lm_head").data, a.vocab_size);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t)
    out[t].assign(logits.begin() + t * a.vocab_size, logits.begin() + (t + 1) * a.vocab_size);
  return out;
}

std::vector<TokenId> oracle_greedy(const ModelArtifact& art, const std::vector<TokenId>& prompt, std::int64_t max_new) {
  const auto registry = builtin_registry();
  DispatchTable table(registry, true);
  const auto cap = static_cast<std::int64_t>(prompt.size()) + max_new + 1;
  ModelRunner runner(art, table, cap, cap);
  const auto g = runner.kv_geometry(cap);
  Buffer<float> keys(static_cast<std::size_t>(g.elements())), values(static_cast<std::size_t>(g.elements()));
  std::int64_t len = 0;
  KVView view{keys.data(), values.data(), g, &len};
  std::vector<TokenId> out;
  auto logits = runner.prefill(view, prompt).logits;
  while (static_cast<std::int64_t>(out.size()) < max_new) {
    const auto next = ops::argmax(logits);
    out.push_back(next);
    if (static_cast<std::int64_t>(out.size()) == max_new) break;
    logits = runner.decode_step(view, next).logits;
  }
  return out;
}

// ---------------------------------------------------------------------------

CliResult run_cli(const std::vector<std::string>& args) {
  TempDir tmp;
  std::string cmd = "'" EDGERT_CLI_PATH "'";
  for (const auto& a : args) {
    std::string q;
    for (char c : a) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
    cmd += " '" + q + "'";
  }
  const auto out_path = tmp / "out", err_path = tmp / "err";
  cmd += " >'" + out_path.string() + "' 2>'" + err_path.string() + "'";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream f(p);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  return r;
}

namespace {

bool type_matches(const std::string& type, const json& v) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "null") return v.is_null();
  if (type == "integer") return v.is_number_integer();
  if (type == "number") return v.is_number();
  throw std::invalid_argument("unsupported schema type " + type);
}

void check(const json& schema, const json& v, const std::string& at, std::vector<std::string>& errs) {
  if (schema.contains("type")) {
    const auto& t = schema["type"];
    bool ok = false;
    if (t.is_string()) ok = type_matches(t.get<std::string>(), v);
    else
      for (const auto& one : t) ok = ok || type_matches(one.get<std::string>(), v);
    if (!ok) {
      errs.push_back(at + ": expected type " + t.dump() + ", got " + v.dump().substr(0, 60));
      return;
    }
  }
  if (schema.contains("enum")) {
    bool found = false;
    for (const auto& e : schema["enum"]) found = found || e == v;
    if (!found) errs.push_back(at + ": value not in enum");
  }
  if (schema.contains("minimum") && v.is_number() && v.get<double>() < schema["minimum"].get<double>())
    errs.push_back(at + ": below minimum");
  if (v.is_object()) {
    if (schema.contains("required"))
      for (const auto& r : schema["required"])
        if (!v.contains(r.get<std::string>())) errs.push_back(at + ": missing required key " + r.get<std::string>());
    const json props = schema.value("properties", json::object());
    for (const auto& [key, val] : v.items()) {
      if (props.contains(key))
        check(props[key], val, at + "." + key, errs);
      else if (schema.contains("additionalProperties")) {
        const auto& ap = schema["additionalProperties"];
        if (ap.is_boolean() && !ap.get<bool>()) errs.push_back(at + ": unexpected key " + key);
        else if (ap.is_object()) check(ap, val, at + "." + key, errs);
      }
    }
  }
  if (v.is_array()) {
    if (schema.contains("minItems") && v.size() < schema["minItems"].get<std::size_t>())
      errs.push_back(at + ": fewer than minItems");
    if (schema.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) check(schema["items"], v[i], at + "[" + std::to_string(i) + "]", errs);
  }
}

// Inlines local "#/$defs/name" references.
json inline_refs(const json& node, const json& root) {
  if (node.is_object()) {
    if (node.contains("$ref")) {
      const auto ref = node["$ref"].get<std::string>();
      const std::string pre = "#/$defs/";
      if (ref.rfind(pre, 0) != 0) throw std::invalid_argument("unsupported $ref " + ref);
      return inline_refs(root.at("$defs").at(ref.substr(pre.size())), root);
    }
    json out = json::object();
    for (const auto& [k, v] : node.items()) out[k] = inline_refs(v, root);
    return out;
  }
  if (node.is_array()) {
    json out = json::array();
    for (const auto& v : node) out.push_back(inline_refs(v, root));
    return out;
  }
  return node;
}

}  // namespace

std::vector<std::string> schema_violations(const json& schema, const json& doc) {
  std::vector<std::string> errs;
  check(inline_refs(schema, schema), doc, "$", errs);
  return errs;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return json::parse(f);
}

}  // namespace edgert::testing
