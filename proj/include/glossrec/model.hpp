#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "glossrec/nn_ops.hpp"
#include "glossrec/rng.hpp"
#include "glossrec/tensor.hpp"

namespace glossrec {

struct Conv1dSpec {
  int filter = 5;
  int stride = 1;
  int pad = 0;
  int pool = 2;  // 0 or 1 = no pooling
};

// Architecture geometry. The temporal window and stride are stored explicitly
// and validated against the accumulated receptive field of the first-level
// encoder layers.
struct ModelConfig {
  std::string preset = "tiny";
  int input_channels = 3;
  int input_height = 32;
  int input_width = 32;
  std::vector<int> s_channel_pattern = {3, 16, 32, 64};
  std::vector<Conv1dSpec> g1_layers = {{5, 1, 0, 2}, {5, 1, 0, 2}};
  int g2_filter = 3;
  int f_s = 64;
  int f_g = 64;
  int f_gp = 128;
  int vocab_size = 12;
  int window = 16;  // accumulated receptive field of g1_layers
  int stride = 4;   // accumulated stride of g1_layers

  int u() const { return vocab_size + 1; }
  int blank() const { return vocab_size; }  // blank is the last class

  // Pooling follows every spatial conv whose channel count increases.
  std::vector<bool> spatial_pool_after() const {
    std::vector<bool> pools;
    for (size_t i = 1; i < s_channel_pattern.size(); ++i)
      pools.push_back(s_channel_pattern[i] > s_channel_pattern[i - 1]);
    return pools;
  }

  // Receptive field and stride accumulated over the first-level layers.
  void accumulated_geometry(int& rf, int& jump) const {
    rf = 1;
    jump = 1;
    for (const auto& l : g1_layers) {
      rf += (l.filter - 1) * jump;
      jump *= l.stride;
      if (l.pool > 1) {
        rf += (l.pool - 1) * jump;
        jump *= l.pool;
      }
    }
  }

  // Number of gloss steps for a t-frame sequence.
  int steps_for(int t) const { return t < window ? 0 : (t - window) / stride + 1; }

  void validate() const {
    if (vocab_size < 1) throw ConfigError("config: vocab_size must be >= 1");
    if (g2_filter % 2 != 1) throw ConfigError("config: g2_filter must be odd");
    if (s_channel_pattern.size() < 2 || s_channel_pattern.front() != input_channels)
      throw ConfigError("config: channel pattern must start at the input channel count");
    if (s_channel_pattern.back() != f_s)
      throw ConfigError("config: channel pattern must end at f_s");
    for (const auto& l : g1_layers)
      if (l.pad != 0)
        throw ConfigError("config: first-level temporal convs use no padding");
    int rf, jump;
    accumulated_geometry(rf, jump);
    if (rf != window || jump != stride)
      throw ConfigError("config: window/stride (" + std::to_string(window) + "," +
                        std::to_string(stride) + ") do not match accumulated geometry (" +
                        std::to_string(rf) + "," + std::to_string(jump) + ")");
    int hw = input_height;
    for (bool p : spatial_pool_after())
      if (p) hw /= 2;
    if (hw < 1) throw ConfigError("config: input too small for the spatial pooling chain");
  }

  static ModelConfig tiny(int vocab) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.validate();
    return c;
  }

  static ModelConfig paper(int vocab) {
    ModelConfig c;
    c.preset = "paper";
    c.input_height = 224;
    c.input_width = 224;
    c.s_channel_pattern = {3, 32, 64, 64, 128, 128, 256, 256, 512, 512};
    c.f_s = 512;
    c.f_g = 512;
    c.f_gp = 1024;
    c.vocab_size = vocab;
    c.validate();
    return c;
  }

  static ModelConfig from_preset(const std::string& name, int vocab) {
    if (name == "tiny") return tiny(vocab);
    if (name == "paper") return paper(vocab);
    throw ConfigError("config: unknown preset '" + name + "'");
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("config: cannot write " + path);
    out << "preset " << preset << "\n";
    out << "input_channels " << input_channels << "\n";
    out << "input_height " << input_height << "\n";
    out << "input_width " << input_width << "\n";
    out << "s_channel_pattern";
    for (int c : s_channel_pattern) out << " " << c;
    out << "\n";
    out << "g1_layers";
    for (const auto& l : g1_layers)
      out << " " << l.filter << ":" << l.stride << ":" << l.pad << ":" << l.pool;
    out << "\n";
    out << "g2_filter " << g2_filter << "\n";
    out << "f_s " << f_s << "\n";
    out << "f_g " << f_g << "\n";
    out << "f_gp " << f_gp << "\n";
    out << "vocab_size " << vocab_size << "\n";
    out << "window " << window << "\n";
    out << "stride " << stride << "\n";
  }

  static ModelConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("config: cannot read " + path);
    ModelConfig c;
    c.s_channel_pattern.clear();
    c.g1_layers.clear();
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string key;
      if (!(ls >> key) || key.empty() || key[0] == '#') continue;
      if (key == "preset") ls >> c.preset;
      else if (key == "input_channels") ls >> c.input_channels;
      else if (key == "input_height") ls >> c.input_height;
      else if (key == "input_width") ls >> c.input_width;
      else if (key == "s_channel_pattern") {
        int v;
        while (ls >> v) c.s_channel_pattern.push_back(v);
      } else if (key == "g1_layers") {
        std::string tok;
        while (ls >> tok) {
          Conv1dSpec spec;
          if (std::sscanf(tok.c_str(), "%d:%d:%d:%d", &spec.filter, &spec.stride, &spec.pad,
                          &spec.pool) != 4)
            throw FormatError("config: bad g1 layer '" + tok + "'");
          c.g1_layers.push_back(spec);
        }
      } else if (key == "g2_filter") ls >> c.g2_filter;
      else if (key == "f_s") ls >> c.f_s;
      else if (key == "f_g") ls >> c.f_g;
      else if (key == "f_gp") ls >> c.f_gp;
      else if (key == "vocab_size") ls >> c.vocab_size;
      else if (key == "window") ls >> c.window;
      else if (key == "stride") ls >> c.stride;
      else throw FormatError("config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
  }
};

// Named parameter store with a fixed registration order so that updates,
// checkpoints and the regularizer are deterministic. Batch-norm running
// statistics live here too but are flagged non-trainable.
template <typename R>
struct ModelParamsT {
  struct Entry {
    std::string name;
    TensorT<R> tensor;
    bool trainable = true;
  };

  std::vector<Entry> entries;
  std::unordered_map<std::string, size_t> index;

  void add(const std::string& name, TensorT<R> t, bool trainable) {
    index.emplace(name, entries.size());
    entries.push_back(Entry{name, std::move(t), trainable});
  }

  TensorT<R>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw UsageError("params: unknown parameter '" + name + "'");
    return entries[it->second].tensor;
  }
  const TensorT<R>& at(const std::string& name) const {
    return const_cast<ModelParamsT*>(this)->at(name);
  }
  bool has(const std::string& name) const { return index.count(name) != 0; }

  std::vector<TensorT<R>*> trainable() {
    std::vector<TensorT<R>*> out;
    for (auto& e : entries)
      if (e.trainable) out.push_back(&e.tensor);
    return out;
  }

  void enable_grads() {
    for (auto& e : entries)
      if (e.trainable) e.tensor.set_requires_grad(true);
  }

  void zero_grads() {
    for (auto& e : entries) e.tensor.zero_grad();
  }

  template <typename R2>
  ModelParamsT<R2> cast() const {
    ModelParamsT<R2> out;
    for (const auto& e : entries) {
      std::vector<R2> v(e.tensor.values().begin(), e.tensor.values().end());
      out.add(e.name, TensorT<R2>(e.tensor.shape(), std::move(v)), e.trainable);
    }
    return out;
  }

  static ModelParamsT init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParamsT p;
    size_t stream = 0;
    auto conv_weight = [&](std::vector<int> shape, int fan_in) {
      Rng rng(Rng::combine(seed, stream++));
      const double limit = he_uniform_limit(fan_in);
      std::vector<R> v(size_t(TensorT<R>::count(shape)));
      for (auto& x : v) x = R(rng.next_uniform(-limit, limit));
      return TensorT<R>(std::move(shape), std::move(v));
    };
    auto add_bn = [&](const std::string& prefix, int channels) {
      p.add(prefix + ".gamma", TensorT<R>::full({channels}, R(1)), true);
      p.add(prefix + ".beta", TensorT<R>::zeros({channels}), true);
      p.add(prefix + ".running_mean", TensorT<R>::zeros({channels}), false);
      p.add(prefix + ".running_var", TensorT<R>::full({channels}, R(1)), false);
      stream += 4;  // keep draw streams stable if bn gains draws later
    };

    const auto& pat = cfg.s_channel_pattern;
    for (size_t i = 0; i + 1 < pat.size(); ++i) {
      const int cin = pat[i];
      const int cout = pat[i + 1];
      const std::string base = "s.conv" + std::to_string(i);
      p.add(base + ".weight", conv_weight({cout, cin, 3, 3}, cin * 9), true);
      p.add(base + ".bias", TensorT<R>::zeros({cout}), true);
      add_bn("s.bn" + std::to_string(i), cout);
    }
    for (size_t i = 0; i < cfg.g1_layers.size(); ++i) {
      const int cin = i == 0 ? cfg.f_s : cfg.f_g;
      const auto& spec = cfg.g1_layers[i];
      const std::string base = "g1.conv" + std::to_string(i);
      p.add(base + ".weight", conv_weight({cfg.f_g, cin, spec.filter}, cin * spec.filter),
            true);
      p.add(base + ".bias", TensorT<R>::zeros({cfg.f_g}), true);
      add_bn("g1.bn" + std::to_string(i), cfg.f_g);
    }
    p.add("g2.conv.weight", conv_weight({cfg.f_gp, cfg.f_g, cfg.g2_filter},
                                        cfg.f_g * cfg.g2_filter), true);
    p.add("g2.conv.bias", TensorT<R>::zeros({cfg.f_gp}), true);
    add_bn("g2.bn", cfg.f_gp);
    p.add("d_fc.weight", conv_weight({cfg.u(), cfg.f_gp}, cfg.f_gp), true);
    p.add("d_fc.bias", TensorT<R>::zeros({cfg.u()}), true);
    p.add("f_fc.weight", conv_weight({cfg.u(), cfg.f_g}, cfg.f_g), true);
    p.add("f_fc.bias", TensorT<R>::zeros({cfg.u()}), true);
    return p;
  }
};

// Per-step class probabilities over vocabulary-plus-blank. log_probs carries
// the tape connection; probs holds plain exp(log_probs) values.
template <typename R>
struct PredictionMapT {
  TensorT<R> probs;
  TensorT<R> log_probs;
  int steps() const { return log_probs.dim(0); }
  int classes() const { return log_probs.dim(1); }
};

// Frame feature encoder: each frame independently through the spatial conv
// stack, then global average pooling. (t,c,h,w) -> (t,f_s).
template <typename R>
TensorT<R> encode_frames(const TensorT<R>& frames, const ModelConfig& cfg,
                         ModelParamsT<R>& params, BnMode mode) {
  if (frames.rank() != 4) throw ShapeError("encode_frames: input must be (t,c,h,w)");
  if (frames.dim(1) != cfg.input_channels || frames.dim(2) != cfg.input_height ||
      frames.dim(3) != cfg.input_width)
    throw ShapeError("encode_frames: frame dims do not match the '" + cfg.preset +
                     "' preset input geometry");
  TensorT<R> x = frames;
  const auto pools = cfg.spatial_pool_after();
  for (size_t i = 0; i + 1 < cfg.s_channel_pattern.size(); ++i) {
    const std::string conv = "s.conv" + std::to_string(i);
    const std::string bn = "s.bn" + std::to_string(i);
    x = conv2d(x, params.at(conv + ".weight"), params.at(conv + ".bias"), 1, 1);
    x = batchnorm(x, params.at(bn + ".gamma"), params.at(bn + ".beta"),
                  params.at(bn + ".running_mean"), params.at(bn + ".running_var"), mode);
    x = relu(x);
    if (pools[i]) x = maxpool2d(x, 2);
  }
  return global_avg_pool(x);
}

// First-level gloss encoder: unpadded temporal convs with pooling, so step i
// sees exactly frames [i*stride, i*stride + window). (t,f_s) -> (k,f_g).
template <typename R>
TensorT<R> encode_gloss_level1(const TensorT<R>& s, const ModelConfig& cfg,
                               ModelParamsT<R>& params, BnMode mode) {
  if (s.rank() != 2) throw ShapeError("encode_gloss_level1: input must be (t,f_s)");
  if (s.dim(0) < cfg.window) throw SequenceTooShortError(s.dim(0), cfg.window);
  TensorT<R> x = transpose(s);  // (f_s, t)
  for (size_t i = 0; i < cfg.g1_layers.size(); ++i) {
    const auto& spec = cfg.g1_layers[i];
    const std::string conv = "g1.conv" + std::to_string(i);
    const std::string bn = "g1.bn" + std::to_string(i);
    x = conv1d(x, params.at(conv + ".weight"), params.at(conv + ".bias"), spec.stride,
               spec.pad);
    x = batchnorm(x, params.at(bn + ".gamma"), params.at(bn + ".beta"),
                  params.at(bn + ".running_mean"), params.at(bn + ".running_var"), mode);
    x = relu(x);
    if (spec.pool > 1) x = maxpool1d(x, spec.pool);
  }
  return transpose(x);  // (k, f_g)
}

// Second-level gloss encoder: one "same"-padded temporal conv, so k is
// preserved and step i sees steps i-1, i, i+1. (k,f_g) -> (k,f_gp).
template <typename R>
TensorT<R> encode_gloss_level2(const TensorT<R>& g, const ModelConfig& cfg,
                               ModelParamsT<R>& params, BnMode mode) {
  if (g.rank() != 2) throw ShapeError("encode_gloss_level2: input must be (k,f_g)");
  TensorT<R> x = transpose(g);  // (f_g, k)
  x = conv1d(x, params.at("g2.conv.weight"), params.at("g2.conv.bias"), 1,
             (cfg.g2_filter - 1) / 2);
  x = batchnorm(x, params.at("g2.bn.gamma"), params.at("g2.bn.beta"),
                params.at("g2.bn.running_mean"), params.at("g2.bn.running_var"), mode);
  x = relu(x);
  return transpose(x);  // (k, f_gp)
}

// CTC decoder head: rows normalized over vocabulary-plus-blank; blank is the
// last class index.
template <typename R>
PredictionMapT<R> decode_head(const TensorT<R>& g2, const ModelConfig& cfg,
                              ModelParamsT<R>& params) {
  TensorT<R> logits = linear(g2, params.at("d_fc.weight"), params.at("d_fc.bias"));
  TensorT<R> lp = log_softmax(logits);
  TensorT<R> probs(lp.shape());
  for (long i = 0; i < lp.numel(); ++i) probs.data()[i] = std::exp(lp.data()[i]);
  (void)cfg;
  return PredictionMapT<R>{std::move(probs), std::move(lp)};
}

// Enhancement head on first-level gloss features.
template <typename R>
TensorT<R> gfe_head(const TensorT<R>& g, ModelParamsT<R>& params) {
  return softmax(linear(g, params.at("f_fc.weight"), params.at("f_fc.bias")));
}

template <typename R>
struct ForwardResultT {
  PredictionMapT<R> map;
  TensorT<R> g;  // first-level gloss features, kept for enhancement pairing
};

template <typename R>
ForwardResultT<R> forward_full(const TensorT<R>& frames, const ModelConfig& cfg,
                               ModelParamsT<R>& params, BnMode mode) {
  TensorT<R> s = encode_frames(frames, cfg, params, mode);
  TensorT<R> g = encode_gloss_level1(s, cfg, params, mode);
  TensorT<R> g2 = encode_gloss_level2(g, cfg, params, mode);
  PredictionMapT<R> map = decode_head(g2, cfg, params);
  return ForwardResultT<R>{std::move(map), std::move(g)};
}

using ModelParams = ModelParamsT<float>;
using PredictionMap = PredictionMapT<float>;
using ForwardResult = ForwardResultT<float>;

}  // namespace glossrec
