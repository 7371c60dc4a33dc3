#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"
#include "uae/geometry.hpp"

namespace uae {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// XYZ text format

inline PointCloud load_xyz_stream(std::istream& in, const std::string& origin,
                                  std::ostream* warn = nullptr) {
  PointCloud cloud;
  cloud.source = origin;
  std::string line;
  int64_t lineno = 0;
  bool warned_extra = false;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<double> cols;
    std::string tok;
    while (ls >> tok) {
      if (tok[0] == '#') break;
      try {
        size_t pos = 0;
        cols.push_back(std::stod(tok, &pos));
        if (pos != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw DataError("load_xyz: '" + origin + "' line " + std::to_string(lineno) +
                        ": non-numeric token '" + tok + "'");
      }
    }
    if (cols.empty()) continue;  // blank or comment line
    if (cols.size() < 3)
      throw DataError("load_xyz: '" + origin + "' line " + std::to_string(lineno) +
                      ": expected at least 3 columns, got " + std::to_string(cols.size()));
    if (cols.size() > 3 && !warned_extra) {
      if (warn) *warn << "load_xyz: '" << origin << "' has " << cols.size()
                      << " columns; ignoring extras beyond xyz\n";
      warned_extra = true;
    }
    cloud.pts.push_back(cols[0]);
    cloud.pts.push_back(cols[1]);
    cloud.pts.push_back(cols[2]);
  }
  if (cloud.pts.empty()) throw DataError("load_xyz: '" + origin + "' contains no points");
  cloud.validate();
  return cloud;
}

inline PointCloud load_xyz(const std::string& path, std::ostream* warn = nullptr) {
  std::ifstream in(path);
  if (!in) throw DataError("load_xyz: cannot open '" + path + "'");
  return load_xyz_stream(in, path, warn ? warn : &std::cerr);
}

inline void save_xyz_stream(const PointCloud& cloud, std::ostream& out) {
  cloud.validate();
  char buf[96];
  for (int64_t i = 0; i < cloud.size(); ++i) {
    // %.17g round-trips IEEE doubles exactly.
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", cloud.pts[3 * i], cloud.pts[3 * i + 1],
                  cloud.pts[3 * i + 2]);
    out << buf;
  }
}

inline void save_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_xyz: cannot open '" + path + "' for writing");
  save_xyz_stream(cloud, out);
  if (!out) throw DataError("save_xyz: write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  std::vector<PointCloud> items;
  std::string split;  // "train" or "test"
  json manifest;      // source, class, split, seed per item

  void validate() const {
    if (items.empty()) return;
    int64_t n = items.front().size();
    for (const auto& c : items) {
      c.validate();
      if (c.size() != n)
        throw DataError("dataset: inconsistent point counts (" + std::to_string(n) + " vs " +
                        std::to_string(c.size()) + ")");
    }
  }
};

// Seeded disjoint, exhaustive split by item index.
inline std::pair<Dataset, Dataset> split_dataset(const std::vector<PointCloud>& items,
                                                 double train_fraction, uint64_t seed) {
  if (!(train_fraction > 0 && train_fraction < 1))
    throw ValueError("split_dataset: train fraction must be in (0,1)");
  int64_t n = static_cast<int64_t>(items.size());
  if (n < 2) throw ValueError("split_dataset: need at least 2 items");
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (int64_t i = n - 1; i > 0; --i)
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(rng.uniform_int(i + 1))]);
  int64_t ntrain = std::max<int64_t>(1, std::llround(train_fraction * static_cast<double>(n)));
  ntrain = std::min(ntrain, n - 1);
  Dataset train, test;
  train.split = "train";
  test.split = "test";
  auto manifest_entry = [&](const PointCloud& c, const char* split) {
    return json{{"source", c.source}, {"class", c.cls}, {"split", split}, {"seed", seed}};
  };
  train.manifest = json::array();
  test.manifest = json::array();
  for (int64_t i = 0; i < n; ++i) {
    const PointCloud& c = items[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    if (i < ntrain) {
      train.items.push_back(c);
      train.manifest.push_back(manifest_entry(c, "train"));
    } else {
      test.items.push_back(c);
      test.manifest.push_back(manifest_entry(c, "test"));
    }
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
// Self-describing binary: magic, u32 version, u64 header length, UTF-8
// JSON header (config hash, epoch/step, RNG state, tensor directory with
// name/shape/offset), u64 payload length, raw little-endian f64 payload,
// u32 CRC-32 of header+payload. Writes go through temp-file-and-rename.

namespace detail {

inline uint32_t crc32(const unsigned char* data, size_t n, uint32_t crc = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc = ~crc;
  for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFF] ^ (crc >> 8);
  return ~crc;
}

}  // namespace detail

inline constexpr char kCkptMagic[8] = {'U', 'A', 'E', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kCkptVersion = 1;

struct CheckpointMeta {
  uint64_t config_hash = 0;
  int64_t epoch = 0;
  int64_t step = 0;
  std::string rng_state;
  json extra;  // free-form (architecture config, run settings)
};

struct Checkpoint {
  CheckpointMeta meta;
  // name -> (shape, f64 data); parameters, batch-norm statistics and
  // optimizer moments all live here under namespaced keys.
  std::map<std::string, std::pair<Shape, std::vector<double>>> tensors;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json dir = json::array();
  std::vector<double> payload;
  for (const auto& [name, entry] : ckpt.tensors) {
    const auto& [shape, data] = entry;
    if (numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("checkpoint: tensor '" + name + "' shape/data mismatch");
    dir.push_back({{"name", name},
                   {"shape", shape},
                   {"offset", payload.size()},
                   {"dtype", "f64"}});
    payload.insert(payload.end(), data.begin(), data.end());
  }
  json header = {{"version", kCkptVersion},
                 {"config_hash", ckpt.meta.config_hash},
                 {"epoch", ckpt.meta.epoch},
                 {"step", ckpt.meta.step},
                 {"rng_state", ckpt.meta.rng_state},
                 {"tensor_count", ckpt.tensors.size()},
                 {"extra", ckpt.meta.extra},
                 {"tensors", dir}};
  std::string hs = header.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot open '" + tmp + "' for writing");
    out.write(kCkptMagic, 8);
    uint32_t ver = kCkptVersion;
    out.write(reinterpret_cast<const char*>(&ver), 4);
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    uint64_t plen = payload.size() * sizeof(double);
    out.write(reinterpret_cast<const char*>(&plen), 8);
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(plen));
    uint32_t crc = detail::crc32(reinterpret_cast<const unsigned char*>(hs.data()), hs.size());
    crc = detail::crc32(reinterpret_cast<const unsigned char*>(payload.data()), plen, crc);
    out.write(reinterpret_cast<const char*>(&crc), 4);
    if (!out) throw DataError("checkpoint: write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  auto need = [&](char* buf, size_t n, const char* what) {
    in.read(buf, static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
      throw DataError(std::string("checkpoint: truncated file while reading ") + what);
  };
  char magic[8];
  need(magic, 8, "magic");
  if (std::memcmp(magic, kCkptMagic, 8) != 0)
    throw DataError("checkpoint: '" + path + "' is not a checkpoint file");
  uint32_t ver = 0;
  need(reinterpret_cast<char*>(&ver), 4, "version");
  if (ver != kCkptVersion)
    throw DataError("checkpoint: version mismatch: file v" + std::to_string(ver) + ", expected v" +
                    std::to_string(kCkptVersion));
  uint64_t hlen = 0;
  need(reinterpret_cast<char*>(&hlen), 8, "header length");
  if (hlen > (1ull << 30)) throw DataError("checkpoint: implausible header length");
  std::string hs(hlen, '\0');
  need(hs.data(), hlen, "header");
  uint64_t plen = 0;
  need(reinterpret_cast<char*>(&plen), 8, "payload length");
  if (plen % sizeof(double) != 0) throw DataError("checkpoint: payload length not a multiple of 8");
  std::vector<double> payload(plen / sizeof(double));
  need(reinterpret_cast<char*>(payload.data()), plen, "payload");
  uint32_t crc_file = 0;
  need(reinterpret_cast<char*>(&crc_file), 4, "checksum");
  uint32_t crc = detail::crc32(reinterpret_cast<const unsigned char*>(hs.data()), hs.size());
  crc = detail::crc32(reinterpret_cast<const unsigned char*>(payload.data()), plen, crc);
  if (crc != crc_file) throw DataError("checkpoint: integrity check failed (corrupted file)");

  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.meta.config_hash = header.at("config_hash").get<uint64_t>();
  ckpt.meta.epoch = header.at("epoch").get<int64_t>();
  ckpt.meta.step = header.at("step").get<int64_t>();
  ckpt.meta.rng_state = header.at("rng_state").get<std::string>();
  ckpt.meta.extra = header.value("extra", json::object());
  if (header.at("tensor_count").get<size_t>() != header.at("tensors").size())
    throw DataError("checkpoint: tensor count does not match directory");
  for (const auto& e : header.at("tensors")) {
    std::string name = e.at("name").get<std::string>();
    Shape shape = e.at("shape").get<Shape>();
    size_t offset = e.at("offset").get<size_t>();
    size_t count = static_cast<size_t>(numel(shape));
    if (offset + count > payload.size())
      throw DataError("checkpoint: tensor '" + name + "' exceeds payload bounds");
    std::vector<double> data(payload.begin() + static_cast<int64_t>(offset),
                             payload.begin() + static_cast<int64_t>(offset + count));
    ckpt.tensors.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)));
  }
  return ckpt;
}

}  // namespace uae
