#pragma once

// On-disk formats: CSEG volumes and masks, CSPT checkpoints, the sample
// manifest with its fold files, and the text artifacts of a run. Every file
// is written whole to a temporary and renamed into place.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "calsam/config.hpp"
#include "calsam/model.hpp"
#include "calsam/synthdata.hpp"
#include "calsam/trainer.hpp"

namespace calsam::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// Little-endian byte packing

class Writer {
 public:
  template <class T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str16(const std::string& s) {
    if (s.size() > 0xffff) throw std::invalid_argument("string too long for u16 length prefix");
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string context) : b_(bytes), ctx_(std::move(context)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  std::string str16() {
    const auto n = get<std::uint16_t>();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void expect_magic(const char (&magic)[5]) {
    char m[4];
    raw(m, 4);
    if (std::memcmp(m, magic, 4) != 0) throw IoError(ctx_ + ": bad magic, expected '" + std::string(magic) + "'");
  }
  void expect_end() const {
    if (pos_ != b_.size()) throw IoError(ctx_ + ": " + std::to_string(b_.size() - pos_) + " trailing bytes");
  }
  const std::string& context() const { return ctx_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw IoError(ctx_ + ": truncated file");
  }
  const std::string& b_;
  std::string ctx_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// CSEG: "CSEG", u16 version, u32 nx ny nz, f32 spacing x y z, voxels x fastest.
// Volumes store f32 voxels, masks u8.

inline constexpr std::uint16_t kVolumeVersion = 1;

inline void put_header(Writer& w, const Extents& d, const Spacing& s) {
  w.raw("CSEG", 4);
  w.put<std::uint16_t>(kVolumeVersion);
  for (auto e : {d.nx, d.ny, d.nz}) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
  for (double v : s) w.put<float>(static_cast<float>(v));
}

inline std::pair<Extents, Spacing> get_header(Reader& r) {
  r.expect_magic("CSEG");
  const auto version = r.get<std::uint16_t>();
  if (version != kVolumeVersion) throw IoError(r.context() + ": unsupported version " + std::to_string(version));
  Extents d;
  d.nx = r.get<std::uint32_t>();
  d.ny = r.get<std::uint32_t>();
  d.nz = r.get<std::uint32_t>();
  Spacing s;
  for (auto& v : s) v = r.get<float>();
  return {d, s};
}

inline std::string encode_volume(const Volume3D& v) {
  Writer w;
  put_header(w, v.dims, v.spacing);
  w.raw(v.data.data(), v.data.size() * sizeof(float));
  return w.bytes();
}

inline Volume3D decode_volume(const std::string& bytes, const std::string& context) {
  Reader r(bytes, context);
  auto [d, s] = get_header(r);
  Volume3D v(d, s);
  r.raw(v.data.data(), v.data.size() * sizeof(float));
  r.expect_end();
  return v;
}

inline std::string encode_mask(const SegMask& m, const Spacing& s) {
  Writer w;
  put_header(w, m.dims, s);
  w.raw(m.labels.data(), m.labels.size());
  return w.bytes();
}

inline SegMask decode_mask(const std::string& bytes, const std::string& context) {
  Reader r(bytes, context);
  auto [d, s] = get_header(r);
  SegMask m(d);
  r.raw(m.labels.data(), m.labels.size());
  r.expect_end();
  for (auto v : m.labels)
    if (v > 1) throw IoError(context + ": mask voxel value " + std::to_string(v) + " is not 0/1");
  return m;
}

// ---------------------------------------------------------------------------
// CSPT checkpoint: "CSPT", u16 version, str16 config hash, u32 count, then per
// tensor: str16 name, u8 group (0 encoder, 1 decoder), u32 rank, u64 extents,
// f64 values.

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const ParamStore& p, const std::string& hash) {
  Writer w;
  w.raw("CSPT", 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.str16(hash);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.theta().size() + p.phi().size()));
  auto put = [&](const NamedTensor& t, std::uint8_t group) {
    w.str16(t.name);
    w.put<std::uint8_t>(group);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.value.rank()));
    for (auto e : t.value.shape()) w.put<std::uint64_t>(e);
    const auto v = t.value.values();
    w.raw(v.data(), v.size() * sizeof(double));
  };
  for (const auto& t : p.theta()) put(t, 0);
  for (const auto& t : p.phi()) put(t, 1);
  return w.bytes();
}

struct Checkpoint {
  std::string config_hash;
  std::vector<NamedTensor> theta, phi;
};

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& context) {
  Reader r(bytes, context);
  r.expect_magic("CSPT");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) throw IoError(context + ": unsupported version " + std::to_string(version));
  Checkpoint c;
  c.config_hash = r.str16();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str16();
    const auto group = r.get<std::uint8_t>();
    ad::Shape shape(r.get<std::uint32_t>());
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.get<std::uint64_t>();
      n *= e;
    }
    std::vector<double> v(n);
    r.raw(v.data(), n * sizeof(double));
    t.value = ad::Tensor(std::move(shape), std::move(v));
    if (group > 1) throw IoError(context + ": bad parameter group for '" + t.name + "'");
    (group == 0 ? c.theta : c.phi).push_back(std::move(t));
  }
  r.expect_end();
  return c;
}

/// Loads a checkpoint and checks it against the architecture of `cfg`.
inline ParamStore load_checkpoint(const fs::path& path, const ModelConfig& cfg, std::string* hash = nullptr) {
  auto c = decode_checkpoint(read_file(path), path.string());
  const auto ref = init_params(cfg, 0);
  auto check = [&](const std::vector<NamedTensor>& got, const std::vector<NamedTensor>& want) {
    if (got.size() != want.size()) throw IoError(path.string() + ": parameter count does not match the model");
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (got[i].name != want[i].name || got[i].value.shape() != want[i].value.shape()) {
        throw IoError(path.string() + ": parameter '" + got[i].name + "' does not match the model");
      }
    }
  };
  check(c.theta, ref.theta());
  check(c.phi, ref.phi());
  if (hash) *hash = c.config_hash;
  return ParamStore(std::move(c.theta), std::move(c.phi));
}

// ---------------------------------------------------------------------------
// Text artifacts. Each starts with "# config_hash=<hex>".

inline std::string hash_line(const std::string& hash) { return "# config_hash=" + hash + "\n"; }

/// Hash recorded in the first line of a text artifact, or "" if none.
inline std::string embedded_hash(const std::string& text) {
  const std::string key = "# config_hash=";
  if (text.rfind(key, 0) != 0) return "";
  const auto end = text.find('\n');
  return text.substr(key.size(), end == std::string::npos ? std::string::npos : end - key.size());
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt(*v) : "nan"; }

// ---------------------------------------------------------------------------
// Manifest: manifest.tsv lists every sample once; folds/<name>.tsv assigns
// roles.

struct ManifestEntry {
  std::string id;
  std::string volume;  // relative to the manifest directory
  std::string mask;
  DomainTag domain;
  std::uint64_t seed = 0;
  std::string volume_fnv;
  std::string mask_fnv;
};

struct Manifest {
  std::string config_hash;
  std::string data_hash;
  synth::Protocol protocol = synth::Protocol::scanner_split;
  std::vector<ManifestEntry> entries;
  std::map<std::string, std::vector<std::pair<std::string, synth::Role>>> folds;  // name -> (id, role)

  const ManifestEntry& entry(const std::string& id) const {
    for (const auto& e : entries)
      if (e.id == id) return e;
    throw std::out_of_range("sample '" + id + "' not in manifest");
  }
};

inline const char* kManifestColumns = "sample_id\tvolume\tmask\tvendor\tcenter\tcorruption\tseverity\tseed\tvolume_fnv\tmask_fnv";

/// Generates every sample of the configured splits under `dir`.
inline Manifest generate_dataset(const RootConfig& cfg, const fs::path& dir) {
  cfg.validate();
  const auto& d = cfg.data;
  const auto splits = synth::build_splits(d.n_per_center, d.centers, d.protocol, d.seed, d.split);
  Manifest m;
  m.config_hash = config_hash(cfg);
  m.data_hash = data_hash(cfg);
  m.protocol = d.protocol;
  std::map<std::string, bool> seen;
  for (const auto& fold : splits.folds) {
    auto& roles = m.folds[fold.name];
    for (const auto& s : fold.samples) {
      roles.emplace_back(s.id, s.role);
      if (seen[s.id]) continue;
      seen[s.id] = true;
      const auto sample = synth::generate_sample(s.seed, d.shape, s.domain, d.synth);
      ManifestEntry e{s.id, "volumes/" + s.id + ".cseg", "masks/" + s.id + ".cseg", s.domain, s.seed, "", ""};
      const auto vb = encode_volume(sample.volume);
      const auto mb = encode_mask(sample.mask, sample.volume.spacing);
      e.volume_fnv = hex64(fnv1a64(vb));
      e.mask_fnv = hex64(fnv1a64(mb));
      write_file_atomic(dir / e.volume, vb);
      write_file_atomic(dir / e.mask, mb);
      m.entries.push_back(std::move(e));
    }
  }
  std::ostringstream out;
  out << hash_line(m.config_hash) << "# data_hash=" << m.data_hash << "\n"
      << "# protocol=" << synth::to_string(m.protocol) << "\n"
      << kManifestColumns << "\n";
  for (const auto& e : m.entries) {
    out << e.id << '\t' << e.volume << '\t' << e.mask << '\t' << to_string(e.domain.vendor) << '\t'
        << e.domain.center << '\t' << to_string(e.domain.corruption) << '\t' << e.domain.severity << '\t' << e.seed
        << '\t' << e.volume_fnv << '\t' << e.mask_fnv << '\n';
  }
  write_file_atomic(dir / "manifest.tsv", out.str());
  for (const auto& [name, roles] : m.folds) {
    std::ostringstream f;
    f << hash_line(m.config_hash) << "sample_id\trole\n";
    for (const auto& [id, role] : roles) f << id << '\t' << synth::to_string(role) << '\n';
    write_file_atomic(dir / "folds" / (name + ".tsv"), f.str());
  }
  return m;
}

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, '\t');) out.push_back(f);
  return out;
}

inline Manifest read_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.tsv";
  const std::string text = read_file(path);
  Manifest m;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  auto fail = [&](const std::string& what) {
    throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(2, eq - 2), value = line.substr(eq + 1);
      if (key == "config_hash") m.config_hash = value;
      if (key == "data_hash") m.data_hash = value;
      if (key == "protocol") m.protocol = synth::parse_protocol(value);
      continue;
    }
    if (!header) {
      if (line != kManifestColumns) fail("unexpected column header");
      header = true;
      continue;
    }
    const auto f = split_tabs(line);
    if (f.size() != 10) fail("expected 10 fields, got " + std::to_string(f.size()));
    try {
      ManifestEntry e{f[0], f[1], f[2], {parse_vendor(f[3]), std::stoi(f[4]), parse_corruption(f[5]), std::stoi(f[6])},
                      std::stoull(f[7]), f[8], f[9]};
      m.entries.push_back(std::move(e));
    } catch (const std::exception& ex) {
      fail(ex.what());
    }
  }
  if (!header) fail("missing column header");
  if (m.config_hash.empty() || m.data_hash.empty()) throw IoError(path.string() + ": missing hash lines");
  std::error_code ec;
  for (const auto& fe : fs::directory_iterator(dir / "folds", ec)) {
    if (fe.path().extension() != ".tsv") continue;
    const std::string ftext = read_file(fe.path());
    auto& roles = m.folds[fe.path().stem().string()];
    std::stringstream fs_(ftext);
    std::size_t n = 0;
    while (std::getline(fs_, line)) {
      ++n;
      if (line.empty() || line[0] == '#' || line == "sample_id\trole") continue;
      const auto f = split_tabs(line);
      if (f.size() != 2) throw IoError(fe.path().string() + ":" + std::to_string(n) + ": expected 2 fields");
      m.entry(f[0]);
      roles.emplace_back(f[0], synth::parse_role(f[1]));
    }
  }
  if (ec) throw IoError("cannot list '" + (dir / "folds").string() + "': " + ec.message());
  if (m.folds.empty()) throw IoError(dir.string() + ": manifest has no fold files");
  return m;
}

/// Reads one sample back from disk. The prompt is re-derived from the mask.
inline synth::Sample load_sample(const fs::path& dir, const ManifestEntry& e, double prompt_sigma) {
  synth::Sample s;
  s.volume = decode_volume(read_file(dir / e.volume), (dir / e.volume).string());
  s.mask = decode_mask(read_file(dir / e.mask), (dir / e.mask).string());
  if (s.volume.dims != s.mask.dims) throw IoError(e.id + ": volume and mask extents differ");
  s.domain = e.domain;
  s.seed = e.seed;
  s.prompt = synth::derive_prompt(s.mask, s.volume.spacing, prompt_sigma, e.seed);
  return s;
}

inline Dataset load_dataset(const fs::path& dir, const Manifest& m, const std::string& fold, const RootConfig& cfg) {
  const auto it = m.folds.find(fold);
  if (it == m.folds.end()) throw IoError(dir.string() + ": no fold named '" + fold + "'");
  Dataset d;
  std::map<synth::Role, std::vector<Example>> eval;
  for (const auto& [id, role] : it->second) {
    const auto& e = m.entry(id);
    auto ex = prepare_example(id, load_sample(dir, e, cfg.data.synth.prompt_sigma), cfg.train.guided);
    if (role == synth::Role::train) {
      d.train.push_back(std::move(ex));
    } else {
      eval[role].push_back(std::move(ex));
    }
  }
  for (auto role : {synth::Role::source, synth::Role::target, synth::Role::motion}) {
    if (eval.count(role)) d.eval.emplace_back(role, std::move(eval[role]));
  }
  if (d.train.empty()) throw IoError(dir.string() + ": fold '" + fold + "' has no training samples");
  return d;
}

// ---------------------------------------------------------------------------
// Run records

inline std::string losses_csv(const RunRecord& r, const std::string& hash) {
  std::ostringstream o;
  o << hash_line(hash) << "epoch,total,sam,fip,cmp\n";
  for (const auto& e : r.epochs) {
    o << e.epoch << ',' << fmt(e.mean.total) << ',' << fmt(e.mean.sam) << ',' << fmt(e.mean.fip) << ','
      << fmt(e.mean.cmp) << '\n';
  }
  return o.str();
}

inline std::string steps_csv(const RunRecord& r, const std::string& hash) {
  std::ostringstream o;
  o << hash_line(hash) << "step,seconds,total,sam,fip,cmp\n";
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    const auto& s = r.steps[i];
    o << i << ',' << fmt(r.step_seconds[i]) << ',' << fmt(s.total) << ',' << fmt(s.sam) << ',' << fmt(s.fip) << ','
      << fmt(s.cmp) << '\n';
  }
  return o.str();
}

inline std::string metrics_csv(const RunRecord& r, const std::string& hash) {
  std::ostringstream o;
  o << hash_line(hash) << "split,sample_id,vendor,center,corruption,dsc,hd95_mm,ece,ace,brier\n";
  for (const auto& s : r.splits) {
    for (const auto& m : s.rows) {
      o << synth::to_string(s.role) << ',' << m.sample_id << ',' << to_string(m.domain.vendor) << ','
        << m.domain.center << ',' << to_string(m.domain.corruption) << ',' << fmt(m.dsc) << ',' << fmt_opt(m.hd95)
        << ',' << fmt(m.ece) << ',' << fmt(m.ace) << ',' << fmt(m.brier) << '\n';
    }
  }
  return o.str();
}

inline std::string reliability_csv(const CalibrationReport& rep, const std::string& hash) {
  std::ostringstream o;
  o << hash_line(hash) << "bin_lo,bin_hi,count,accuracy,confidence\n";
  for (const auto& b : rep.bins) {
    o << fmt(b.lower) << ',' << fmt(b.upper) << ',' << b.count << ',' << fmt(b.accuracy) << ',' << fmt(b.confidence)
      << '\n';
  }
  return o.str();
}

inline json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"count", m.count}}; }

inline json summary_json(const RunRecord& r, const std::string& hash) {
  json j;
  j["config_hash"] = hash;
  j["ablation"] = to_string(r.config.ablation);
  j["seed"] = r.config.seed;
  j["steps"] = r.steps.size();
  j["clipped_steps"] = r.clipped_steps;
  j["clip_norm"] = r.config.clip_norm ? json(*r.config.clip_norm) : json(nullptr);
  j["final_loss"] = r.epochs.empty() ? json(nullptr) : json(r.epochs.back().mean.total);
  for (const auto& s : r.splits) {
    j["splits"][synth::to_string(s.role)] = {{"dsc", mean_std_json(s.summary.dsc)},
                                             {"hd95_mm", mean_std_json(s.summary.hd95)},
                                             {"hd95_undefined", s.summary.hd95_undefined},
                                             {"ece", mean_std_json(s.summary.ece)},
                                             {"ace", mean_std_json(s.summary.ace)},
                                             {"brier", mean_std_json(s.summary.brier)},
                                             {"pooled_ece", s.pooled.ece},
                                             {"samples", s.summary.samples}};
  }
  if (auto g = r.dgg_dsc()) j["dgg"]["dsc"] = *g;
  if (auto g = r.dgg_ece()) j["dgg"]["ece"] = *g;
  return j;
}

/// Config snapshot with the run's own ablation and seed filled in.
inline RootConfig run_config(const RootConfig& root, const TrainConfig& t) {
  RootConfig c = root;
  c.train = t;
  return c;
}

/// Writes a run directory and returns the hash stamped into it.
inline std::string write_run_record(const fs::path& dir, const RootConfig& cfg, const RunRecord& r) {
  const std::string hash = config_hash(cfg);
  json snap = to_json(cfg);
  snap["config_hash"] = hash;
  write_file_atomic(dir / "config.json", snap.dump(2) + "\n");
  write_file_atomic(dir / "loss.csv", losses_csv(r, hash));
  write_file_atomic(dir / "steps.csv", steps_csv(r, hash));
  write_file_atomic(dir / "metrics.csv", metrics_csv(r, hash));
  for (const auto& s : r.splits) {
    write_file_atomic(dir / ("reliability_" + synth::to_string(s.role) + ".csv"), reliability_csv(s.pooled, hash));
  }
  write_file_atomic(dir / "checkpoint.cspt", encode_checkpoint(r.params, hash));
  write_file_atomic(dir / "summary.json", summary_json(r, hash).dump(2) + "\n");
  return hash;
}

}  // namespace calsam::io
