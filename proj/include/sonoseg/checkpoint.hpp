#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sonoseg/optim.hpp"
#include "sonoseg/tensor.hpp"

namespace sonoseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

// On-disk weight archive: a line-oriented text manifest followed by the raw
// float64 payload, tensors concatenated in manifest order.
//
//   sonoseg-checkpoint v1
//   kind <teacher|student>
//   tensors <N>
//   <name> <ndim> <d0> <d1> ...      (N lines)
//   payload
//   <8*sum(numel) bytes, little-endian float64>
struct Checkpoint {
  std::string kind;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const std::string& path, const std::string& kind,
                            const ParamList& params) {
  if (kind != "teacher" && kind != "student")
    throw ContractViolation("checkpoint kind must be teacher or student, got '" + kind + "'");
  check_unique_names(params);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f << "sonoseg-checkpoint v1\n";
  f << "kind " << kind << "\n";
  f << "tensors " << params.size() << "\n";
  for (const auto& p : params) {
    f << p.name << " " << p.value.rank();
    for (int64_t d : p.value.shape()) f << " " << d;
    f << "\n";
  }
  f << "payload\n";
  for (const auto& p : params) {
    const auto& d = p.value.data();
    f.write(reinterpret_cast<const char*>(d.data()),
            static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!f) throw DataError("write failure on '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(f, line)) throw DataError(std::string("checkpoint truncated before ") + what);
    return line;
  };
  if (next_line("magic") != "sonoseg-checkpoint v1")
    throw DataError("'" + path + "' is not a sonoseg checkpoint (bad magic '" + line + "')");

  Checkpoint ck;
  {
    std::istringstream ss(next_line("kind"));
    std::string key;
    ss >> key >> ck.kind;
    if (key != "kind" || (ck.kind != "teacher" && ck.kind != "student"))
      throw DataError("checkpoint kind line malformed: '" + line + "'");
  }
  size_t n = 0;
  {
    std::istringstream ss(next_line("tensor count"));
    std::string key;
    long long cnt = -1;
    ss >> key >> cnt;
    if (key != "tensors" || cnt < 0) throw DataError("checkpoint tensor count malformed: '" + line + "'");
    n = static_cast<size_t>(cnt);
  }
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> entries;
  entries.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    std::istringstream ss(next_line("tensor entry"));
    Entry e;
    int ndim = -1;
    ss >> e.name >> ndim;
    if (e.name.empty() || ndim < 1) throw DataError("checkpoint entry malformed: '" + line + "'");
    e.shape.resize(ndim);
    for (int d = 0; d < ndim; ++d) {
      if (!(ss >> e.shape[d]) || e.shape[d] < 1)
        throw DataError("checkpoint entry malformed: '" + line + "'");
    }
    entries.push_back(std::move(e));
  }
  if (next_line("payload marker") != "payload")
    throw DataError("checkpoint payload marker missing, got '" + line + "'");

  for (auto& e : entries) {
    size_t cnt = static_cast<size_t>(numel_of(e.shape));
    std::vector<double> d(cnt);
    f.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(cnt * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(cnt * sizeof(double)))
      throw DataError("checkpoint payload truncated at tensor '" + e.name + "'");
    ck.tensors.emplace_back(e.name, Tensor::from_data(e.shape, std::move(d)));
  }
  // trailing bytes mean the manifest and payload disagree
  char probe;
  if (f.read(&probe, 1); f.gcount() != 0)
    throw DataError("checkpoint has trailing bytes past declared payload");
  return ck;
}

// Strict restore: the checkpoint must carry exactly the parameter set of the
// receiving model, with matching shapes. Values are copied into the existing
// tensors so optimizer/module aliases stay live.
inline void load_into(ParamList& params, const Checkpoint& ck) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : ck.tensors) by_name[n] = &t;
  if (by_name.size() != ck.tensors.size())
    throw DataError("checkpoint contains duplicate tensor names");
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint missing parameter '" + p.name + "'");
    if (!(it->second->shape() == p.value.shape()))
      throw DataError("checkpoint shape mismatch for '" + p.name + "': file has " +
                      shape_str(it->second->shape()) + ", model expects " +
                      shape_str(p.value.shape()));
    p.value.raw_data() = it->second->data();
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw DataError("checkpoint has unexpected tensor '" + by_name.begin()->first + "'");
}

}  // namespace sonoseg
