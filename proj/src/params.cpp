#include "rdat/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

#include "rdat/errors.hpp"

namespace rdat {

static_assert(std::endian::native == std::endian::little, "NPY writer assumes a little-endian host");

Tensor& ParamSet::add(const std::string& name, Tensor value) {
  auto [it, inserted] = tensors_.insert_or_assign(name, std::move(value));
  return it->second;
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

bool ParamSet::all_finite() const {
  for (const auto& [_, t] : tensors_)
    if (!t.all_finite()) return false;
  return true;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) out.add(name, Tensor(t.shape()));
  return out;
}

std::uint64_t checksum(const ParamSet& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params.tensors()) {
    mix(name.data(), name.size());
    for (std::size_t d : t.shape()) mix(&d, sizeof d);
    mix(t.data(), t.size() * sizeof(double));
  }
  return h;
}

BoundParams::BoundParams(ag::Tape& tape, const ParamSet& params, bool requires_grad) : tape_(&tape) {
  for (const auto& [name, t] : params.tensors()) vars_.emplace(name, tape.leaf(t, requires_grad));
}

ag::Var BoundParams::operator()(const std::string& name) const {
  auto it = vars_.find(prefix_ + name);
  if (it == vars_.end()) throw ContractError("parameter '" + prefix_ + name + "' is not bound");
  return it->second;
}

BoundParams BoundParams::scoped(const std::string& prefix) const {
  BoundParams view;
  view.tape_ = tape_;
  view.vars_ = vars_;
  view.prefix_ = prefix_ + prefix;
  return view;
}

ParamSet BoundParams::gradients() const {
  ParamSet out;
  for (const auto& [name, v] : vars_) out.add(name, tape_->grad_or_zero(v.id));
  return out;
}

void Adam::step(ParamSet& params, const ParamSet& grads) {
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (auto& [name, p] : params.tensors()) {
    if (!grads.contains(name)) continue;
    const Tensor& g = grads.at(name);
    if (g.size() != p.size()) throw ContractError("Adam: gradient shape mismatch for '" + name + "'");
    Tensor& m = first_.try_emplace(name, p.shape()).first->second;
    Tensor& v = second_.try_emplace(name, p.shape()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

// ----------------------------------------------------------------------- NPY

void write_npy(const std::filesystem::path& path, const Tensor& tensor) {
  std::ostringstream shape;
  shape << '(';
  for (std::size_t i = 0; i < tensor.rank(); ++i) shape << tensor.dim(i) << (tensor.rank() == 1 ? "," : (i + 1 < tensor.rank() ? ", " : ""));
  shape << ')';
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape.str() + ", }";
  const std::size_t preamble = 10;
  std::size_t total = preamble + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const char magic[] = {'\x93', 'N', 'U', 'M', 'P', 'Y', 1, 0};
  out.write(magic, sizeof magic);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  if (!out) throw IoError("short write to " + path.string());
}

Tensor read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "\x93NUMPY", 6) != 0) throw ParseError(path.string() + ": not an NPY file");
  std::size_t header_len = 0;
  if (magic[6] == 1) {
    std::uint16_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 2);
    header_len = len;
  } else {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), 4);
    header_len = len;
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (header.find("'<f8'") == std::string::npos) throw ParseError(path.string() + ": only little-endian float64 is supported");
  if (header.find("'fortran_order': False") == std::string::npos) throw ParseError(path.string() + ": fortran order not supported");
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('shape':\s*\(([^)]*)\))"))) throw ParseError(path.string() + ": missing shape");
  std::vector<std::size_t> shape;
  std::stringstream dims(m[1].str());
  std::string tok;
  while (std::getline(dims, tok, ',')) {
    const auto first = tok.find_first_not_of(' ');
    if (first == std::string::npos) continue;
    shape.push_back(static_cast<std::size_t>(std::stoull(tok.substr(first))));
  }
  Tensor t(shape);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) throw ParseError(path.string() + ": truncated data");
  return t;
}

// --------------------------------------------------------------- checkpoints

void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params, const Manifest& manifest) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream out(dir / "manifest.txt");
  if (!out) throw IoError("cannot write " + (dir / "manifest.txt").string());
  for (const auto& [key, value] : manifest) out << key << " = " << value << '\n';
  for (const auto& [name, t] : params.tensors()) {
    out << "array " << name << ' ' << shape_string(t.shape()) << '\n';
    write_npy(dir / (name + ".npy"), t);
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw IoError("no checkpoint manifest in " + dir.string());
  Checkpoint ck;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("array ", 0) == 0) {
      std::istringstream ls(line.substr(6));
      std::string name;
      ls >> name;
      ck.params.add(name, read_npy(dir / (name + ".npy")));
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw ParseError("malformed manifest line: " + line);
    ck.manifest[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return ck;
}

}  // namespace rdat
