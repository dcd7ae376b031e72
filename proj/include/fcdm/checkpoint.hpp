#pragma once

#include <sstream>
#include <string>

#include "fcdm/binary_io.hpp"
#include "fcdm/config.hpp"
#include "fcdm/optim.hpp"

namespace fcdm {

/// Everything needed to continue or evaluate a run.
struct Checkpoint {
  /// Resolved configs keyed "model", "train", "schedule".
  json config = json::object();
  std::uint64_t step = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  ParamStore<float> params;
  ParamStore<float> ema;
  OptimizerState<float> opt;
};

namespace detail {

inline void put_record(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  if (name.size() > 0xffff) throw Error("checkpoint: parameter name too long: " + name);
  if (t.ndim() > 0xff) throw Error("checkpoint: too many dimensions in " + name);
  io::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  os.put(static_cast<char>(t.ndim()));
  for (auto d : t.shape()) {
    if (d > 0xffffffffULL) throw Error("checkpoint: extent too large in " + name);
    io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  io::put_f32s(os, t.data(), t.numel());
}

inline std::pair<std::string, Tensor<float>> get_record(io::Reader& r) {
  const auto len = r.le<std::uint16_t>("record name length");
  std::string name(len, '\0');
  r.bytes(name.data(), len, "record name");
  const auto ndim = r.le<std::uint8_t>("record rank");
  if (ndim == 0) throw FormatError("checkpoint: record " + name + " has rank 0");
  Shape shape(ndim);
  for (auto& d : shape) {
    d = r.le<std::uint32_t>("record extent");
    if (d == 0) throw FormatError("checkpoint: record " + name + " has a zero extent");
  }
  Tensor<float> t(shape);
  r.f32s(t.data(), t.numel(), "record payload");
  return {std::move(name), std::move(t)};
}

constexpr const char* kEmaPrefix = "ema/";
constexpr const char* kMomentPrefix[2] = {"adam_m/", "adam_v/"};

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  if (!ck.ema.same_layout(ck.params)) throw Error("checkpoint: EMA layout differs from parameters");
  if (ck.opt.m.size() != ck.params.size() || ck.opt.v.size() != ck.params.size())
    throw Error("checkpoint: optimizer moments do not match parameters");
  json header{{"config", ck.config},
              {"step", ck.step},
              {"rng", {{"seed", ck.rng_seed}, {"counter", ck.rng_counter}}},
              {"optimizer_step", ck.opt.step},
              {"sections", {{"params", ck.params.size()}, {"ema", ck.ema.size()}, {"optimizer", 2 * ck.params.size()}}}};
  const std::string text = header.dump();
  os.write("FCKP", 4);
  io::put_le<std::uint32_t>(os, 1);
  io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < ck.params.size(); ++i) detail::put_record(os, ck.params.names()[i], ck.params.tensors()[i]);
  for (std::size_t i = 0; i < ck.ema.size(); ++i)
    detail::put_record(os, detail::kEmaPrefix + ck.ema.names()[i], ck.ema.tensors()[i]);
  for (int k = 0; k < 2; ++k) {
    const auto& moments = k == 0 ? ck.opt.m : ck.opt.v;
    for (std::size_t i = 0; i < ck.params.size(); ++i)
      detail::put_record(os, detail::kMomentPrefix[k] + ck.params.names()[i], moments[i]);
  }
}

inline Checkpoint read_checkpoint(std::istream& is, const std::string& what = "checkpoint") {
  io::Reader r(is, what);
  r.magic("FCKP");
  const auto version = r.le<std::uint32_t>("version");
  if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto hlen = r.le<std::uint32_t>("header length");
  std::string text(hlen, '\0');
  r.bytes(text.data(), hlen, "header");
  Checkpoint ck;
  std::size_t n_params = 0, n_ema = 0, n_opt = 0;
  try {
    const json h = json::parse(text);
    ck.config = h.at("config");
    ck.step = h.at("step").get<std::uint64_t>();
    ck.rng_seed = h.at("rng").at("seed").get<std::uint64_t>();
    ck.rng_counter = h.at("rng").at("counter").get<std::uint64_t>();
    ck.opt.step = h.at("optimizer_step").get<std::uint64_t>();
    n_params = h.at("sections").at("params").get<std::size_t>();
    n_ema = h.at("sections").at("ema").get<std::size_t>();
    n_opt = h.at("sections").at("optimizer").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(what + ": bad header: " + e.what());
  }
  if (n_ema != n_params || n_opt != 2 * n_params)
    throw FormatError(what + ": section sizes " + std::to_string(n_params) + "/" + std::to_string(n_ema) + "/" +
                      std::to_string(n_opt) + " are inconsistent");
  for (std::size_t i = 0; i < n_params; ++i) {
    auto [name, t] = detail::get_record(r);
    ck.params.add(name, std::move(t));
  }
  auto expect = [&](const std::string& prefix, std::size_t i) {
    auto [name, t] = detail::get_record(r);
    const std::string& want = ck.params.names()[i];
    if (name != prefix + want) throw FormatError(what + ": expected record " + prefix + want + ", found " + name);
    if (t.shape() != ck.params.tensors()[i].shape())
      throw FormatError(what + ": record " + name + " has shape " + shape_str(t.shape()));
    return std::move(t);
  };
  for (std::size_t i = 0; i < n_params; ++i) ck.ema.add(ck.params.names()[i], expect(detail::kEmaPrefix, i));
  for (std::size_t i = 0; i < n_params; ++i) ck.opt.m.push_back(expect(detail::kMomentPrefix[0], i));
  for (std::size_t i = 0; i < n_params; ++i) ck.opt.v.push_back(expect(detail::kMomentPrefix[1], i));
  if (!r.at_end()) throw FormatError(what + ": trailing bytes after tensor records");
  return ck;
}

inline std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, ck);
  return os.str();
}

/// Writes `path` atomically through a temporary file.
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  {
    auto f = io::open_out(tmp);
    write_checkpoint(f, ck);
    f.flush();
    if (!f) throw Error("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot rename " + tmp + " to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto f = io::open_in(path);
  return read_checkpoint(f, path);
}

}  // namespace fcdm
