#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "disco/cmadiff.hpp"
#include "disco/image.hpp"
#include "disco/synthdata.hpp"

namespace disco {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

struct TrainConfig {
  int steps = 5000;
  int batch_size = 16;
  double lr = 1e-4; // decays linearly to 0 over `steps`
  LossWeights weights;
  double cond_dropout = 0.1;
  int t_steps = kTimesteps;
  int n_max = kNMax;
  std::uint64_t seed = 0;
  int eval_every = 500;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int log_every = 25;
  int threads = 0; // 0 = all hardware threads
};

inline nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"lambda_ldm", c.weights.ldm},
          {"lambda_union", c.weights.kl},
          {"lambda_layout", c.weights.layout},
          {"cond_dropout", c.cond_dropout},
          {"t_steps", c.t_steps},
          {"n_max", c.n_max},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"log_every", c.log_every},
          {"threads", c.threads}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weights.ldm = j.value("lambda_ldm", c.weights.ldm);
  c.weights.kl = j.value("lambda_union", c.weights.kl);
  c.weights.layout = j.value("lambda_layout", c.weights.layout);
  c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
  c.t_steps = j.value("t_steps", c.t_steps);
  c.n_max = j.value("n_max", c.n_max);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.log_every = j.value("log_every", c.log_every);
  c.threads = j.value("threads", c.threads);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!train_config_to_json(TrainConfig{}).contains(it.key()))
      fail(errc::parse, "train config: unknown key \"" + it.key() + "\"");
  return c;
}

// ----------------------------------------------------------------------------
// adaptive moments with decoupled weight decay

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;
  std::vector<std::vector<double>> m, v; // indexed like the ParamList

  void init(const ParamList& params) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : params.items) {
      m.emplace_back(p.data->size(), 0.0);
      v.emplace_back(p.data->size(), 0.0);
    }
  }

  void step(ParamList& params, const std::vector<std::vector<double>>& grads, double lr, double wd) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, double(t));
    double bc2 = 1.0 - std::pow(beta2, double(t));
    for (std::size_t i = 0; i < params.items.size(); ++i) {
      auto& p = *params.items[i].second.data;
      const auto& g = grads[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
        double mhat = m[i][j] / bc1;
        double vhat = v[i][j] / bc2;
        p[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[j]);
      }
    }
  }
};

// ----------------------------------------------------------------------------
// deterministic batch-parallel helper: results land in index order

template <class Fn>
inline void parallel_for(int n, int threads, Fn&& fn) {
  if (threads <= 0) threads = int(std::thread::hardware_concurrency());
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ----------------------------------------------------------------------------
// training loop

struct LogRow {
  std::int64_t step = 0;
  double total = 0, ldm = 0, kl = 0, layout = 0;
};

struct TrainState {
  DiscoModel model;
  AdamW opt;
  TrainConfig config;
  std::int64_t step = 0;
  Rng rng; // stream state persisted across save/load
  std::vector<LogRow> loss_curve;
};

namespace train_detail {

struct ItemResult {
  double total = 0, ldm = 0, kl = 0, layout = 0;
  std::vector<std::vector<double>> grads; // ParamList order
};

inline ItemResult run_item(const DiscoModel& model, const ParamList& params, const Tensor& image,
                           const SceneGraph& graph, Rng item_rng, const TrainConfig& cfg) {
  LossParts parts = total_loss_item(model, image, graph, item_rng, cfg.weights, cfg.cond_dropout);
  ItemResult out;
  out.total = parts.total.item();
  out.ldm = parts.ldm.item();
  out.kl = parts.kl.item();
  out.layout = parts.layout.item();
  GradMap gm = backward(parts.total);
  out.grads.reserve(params.items.size());
  for (const auto& [name, p] : params.items) {
    if (gm.contains(p))
      out.grads.push_back(*gm.at(p).data);
    else
      out.grads.emplace_back(p.data->size(), 0.0);
  }
  return out;
}

} // namespace train_detail

// One optimization step over a sampled batch. Items are evaluated in
// parallel against read-only parameters; gradients reduce in item order, so
// results do not depend on the thread count.
inline LogRow train_step(TrainState& ts, const Dataset& data, ParamList& params) {
  const TrainConfig& cfg = ts.config;
  int n = int(data.graphs.size());
  Rng batch_rng = Rng(cfg.seed).split("batch").split(std::uint64_t(ts.step));
  std::vector<int> idx;
  for (int k = 0; k < cfg.batch_size; ++k) idx.push_back(int(batch_rng.uniform_int(0, n - 1)));

  std::vector<train_detail::ItemResult> results(idx.size());
  try {
    parallel_for(int(idx.size()), cfg.threads, [&](int k) {
      Rng item_rng = Rng(cfg.seed).split("item").split(std::uint64_t(ts.step)).split(std::uint64_t(k));
      results[std::size_t(k)] = train_detail::run_item(ts.model, params, data.images[std::size_t(idx[std::size_t(k)])],
                                                       data.graphs[std::size_t(idx[std::size_t(k)])], item_rng, cfg);
    });
  } catch (const error& e) {
    if (e.kind() != errc::nonfinite) throw;
    std::cerr << "train: aborted at step " << ts.step << " (" << e.what() << "); batch indices:";
    for (int i : idx) std::cerr << " " << i;
    std::cerr << "\n";
    fail(errc::nonfinite, "train: non-finite values at step " + std::to_string(ts.step) + ": " + e.what());
  }

  LogRow row;
  row.step = ts.step;
  std::vector<std::vector<double>> grads;
  for (const auto& [name, p] : params.items) grads.emplace_back(p.data->size(), 0.0);
  double inv_b = 1.0 / double(idx.size());
  for (const auto& r : results) {
    row.total += r.total * inv_b;
    row.ldm += r.ldm * inv_b;
    row.kl += r.kl * inv_b;
    row.layout += r.layout * inv_b;
    for (std::size_t i = 0; i < grads.size(); ++i)
      for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += r.grads[i][j] * inv_b;
  }

  if (!std::isfinite(row.total)) {
    std::cerr << "train: non-finite loss at step " << ts.step << "; batch indices:";
    for (int i : idx) std::cerr << " " << i;
    std::cerr << "\nper-item (total ldm kl layout):\n";
    for (const auto& r : results)
      std::cerr << "  " << r.total << " " << r.ldm << " " << r.kl << " " << r.layout << "\n";
    fail(errc::nonfinite, "train: non-finite loss at step " + std::to_string(ts.step));
  }

  if (cfg.clip_norm > 0) {
    double norm2 = 0;
    for (const auto& g : grads)
      for (double x : g) norm2 += x * x;
    double norm = std::sqrt(norm2);
    if (norm > cfg.clip_norm) {
      double s = cfg.clip_norm / norm;
      for (auto& g : grads)
        for (double& x : g) x *= s;
    }
  }

  double lr_t = cfg.lr * (1.0 - double(ts.step) / double(std::max(1, cfg.steps)));
  ts.opt.step(params, grads, lr_t, cfg.weight_decay);
  ++ts.step;
  return row;
}

inline void train(TrainState& ts, const Dataset& data, std::ostream* log = nullptr) {
  if (data.graphs.empty()) fail(errc::constraint, "train: empty dataset");
  ParamList params = ts.model.params();
  if (ts.opt.m.empty()) ts.opt.init(params);
  while (ts.step < ts.config.steps) {
    LogRow row = train_step(ts, data, params);
    if (row.step % std::max(1, ts.config.log_every) == 0 || row.step + 1 == ts.config.steps) {
      ts.loss_curve.push_back(row);
      if (log)
        (*log) << "step " << row.step << " total " << row.total << " ldm " << row.ldm << " kl " << row.kl
               << " layout " << row.layout << "\n";
    }
  }
}

// ----------------------------------------------------------------------------
// checkpoint file: magic DISCO001, named f64 tensors, trailing config JSON

namespace ckpt_detail {

inline void put_u16(std::string& out, std::uint16_t v) { out.append(reinterpret_cast<const char*>(&v), 2); }
inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

inline void put_tensor(std::string& out, const std::string& name, const Shape& shape,
                       const std::vector<double>& values) {
  put_u16(out, std::uint16_t(name.size()));
  out.append(name);
  out.push_back(char(std::uint8_t(shape.size())));
  for (int d : shape) put_u32(out, std::uint32_t(d));
  out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const std::string& what) {
    if (pos + n > bytes.size()) fail(errc::corrupt, "checkpoint: truncated while reading " + what);
  }
  std::uint16_t u16(const std::string& what) {
    need(2, what);
    std::uint16_t v;
    std::memcpy(&v, bytes.data() + pos, 2);
    pos += 2;
    return v;
  }
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
  std::uint8_t u8(const std::string& what) {
    need(1, what);
    return std::uint8_t(bytes[pos++]);
  }
  std::string raw(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

} // namespace ckpt_detail

constexpr char kCheckpointMagic[9] = "DISCO001";

inline std::string checkpoint_bytes(const TrainState& ts) {
  ParamList params = ts.model.params();
  std::string out(kCheckpointMagic, 8);

  std::uint32_t count = std::uint32_t(params.items.size() * (ts.opt.m.empty() ? 1 : 3));
  ckpt_detail::put_u32(out, count);
  for (const auto& [name, p] : params.items) ckpt_detail::put_tensor(out, name, p.shape, *p.data);
  if (!ts.opt.m.empty()) {
    for (std::size_t i = 0; i < params.items.size(); ++i)
      ckpt_detail::put_tensor(out, "opt.m." + params.items[i].first, params.items[i].second.shape, ts.opt.m[i]);
    for (std::size_t i = 0; i < params.items.size(); ++i)
      ckpt_detail::put_tensor(out, "opt.v." + params.items[i].first, params.items[i].second.shape, ts.opt.v[i]);
  }

  nlohmann::ordered_json meta;
  meta["config"] = train_config_to_json(ts.config);
  meta["vocab"] = vocabulary_to_json(ts.model.embedder.vocab);
  meta["step"] = ts.step;
  meta["adam_t"] = ts.opt.t;
  meta["rng"] = {{"seed", ts.rng.seed}, {"counter", ts.rng.counter}};
  nlohmann::ordered_json curve = nlohmann::ordered_json::array();
  for (const auto& row : ts.loss_curve) curve.push_back({row.step, row.total, row.ldm, row.kl, row.layout});
  meta["loss_curve"] = curve;
  std::string meta_str = meta.dump();
  ckpt_detail::put_u32(out, std::uint32_t(meta_str.size()));
  out.append(meta_str);
  return out;
}

inline void save_checkpoint(const TrainState& ts, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_bytes(ts));
}

inline TrainState load_checkpoint_bytes(const std::string& bytes) {
  if (bytes.size() < 8) fail(errc::corrupt, "checkpoint: too short for magic");
  if (bytes.compare(0, 5, "DISCO") != 0) fail(errc::corrupt, "checkpoint: bad magic");
  if (bytes.compare(0, 8, kCheckpointMagic) != 0)
    fail(errc::version, "checkpoint: unsupported version \"" + bytes.substr(5, 3) + "\"");

  ckpt_detail::Reader rd{bytes, 8};
  std::uint32_t count = rd.u32("tensor count");
  struct Entry {
    Shape shape;
    std::vector<double> values;
  };
  std::vector<std::pair<std::string, Entry>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t name_len = rd.u16("tensor name length");
    std::string name = rd.raw(name_len, "tensor name");
    std::uint8_t rank = rd.u8("rank of " + name);
    Shape shape;
    std::int64_t n = 1;
    for (int d = 0; d < int(rank); ++d) {
      shape.push_back(int(rd.u32("dims of " + name)));
      n *= shape.back();
    }
    std::string raw = rd.raw(std::size_t(n) * sizeof(double), "values of " + name);
    std::vector<double> values(std::size_t(n), 0.0);
    std::memcpy(values.data(), raw.data(), raw.size());
    entries.emplace_back(std::move(name), Entry{std::move(shape), std::move(values)});
  }
  std::uint32_t meta_len = rd.u32("config length");
  nlohmann::json meta = nlohmann::json::parse(rd.raw(meta_len, "config JSON"));
  if (rd.pos != bytes.size()) fail(errc::corrupt, "checkpoint: trailing bytes after config");

  TrainState ts;
  ts.config = train_config_from_json(meta.at("config"));
  ts.model = DiscoModel(vocabulary_from_json(meta.at("vocab")), /*seed=*/0, ts.config.t_steps);
  ts.step = meta.at("step").get<std::int64_t>();
  ts.opt.t = meta.at("adam_t").get<std::int64_t>();
  ts.rng.seed = meta.at("rng").at("seed").get<std::uint64_t>();
  ts.rng.counter = meta.at("rng").at("counter").get<std::uint64_t>();
  for (const auto& row : meta.at("loss_curve"))
    ts.loss_curve.push_back(LogRow{row[0].get<std::int64_t>(), row[1].get<double>(), row[2].get<double>(),
                                   row[3].get<double>(), row[4].get<double>()});

  auto find = [&](const std::string& name) -> Entry* {
    for (auto& [n, e] : entries)
      if (n == name) return &e;
    return nullptr;
  };

  ParamList params = ts.model.params();
  bool has_opt = find("opt.m." + params.items[0].first) != nullptr;
  if (has_opt) ts.opt.init(params);
  std::size_t used = 0;
  for (std::size_t i = 0; i < params.items.size(); ++i) {
    const auto& [name, p] = params.items[i];
    Entry* e = find(name);
    if (!e) fail(errc::corrupt, "checkpoint: missing tensor \"" + name + "\"");
    if (e->shape != p.shape)
      fail(errc::corrupt, "checkpoint: tensor \"" + name + "\" has shape " + shape_str(e->shape) +
                              ", expected " + shape_str(p.shape));
    *p.data = e->values;
    ++used;
    if (has_opt) {
      Entry* em = find("opt.m." + name);
      Entry* ev = find("opt.v." + name);
      if (!em || !ev) fail(errc::corrupt, "checkpoint: missing optimizer moments for \"" + name + "\"");
      ts.opt.m[i] = em->values;
      ts.opt.v[i] = ev->values;
      used += 2;
    }
  }
  if (used != entries.size()) fail(errc::corrupt, "checkpoint: unexpected extra tensors");
  return ts;
}

inline TrainState load_checkpoint(const std::filesystem::path& path) {
  return load_checkpoint_bytes(read_file(path));
}

} // namespace disco
