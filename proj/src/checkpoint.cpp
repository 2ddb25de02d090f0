#include "synstitch/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "synstitch/errors.hpp"

namespace synstitch {

namespace {

constexpr char kMagic[8] = {'S', 'Y', 'N', 'S', 'T', 'C', 'K', '1'};
constexpr char kAdamMagic[8] = {'S', 'Y', 'N', 'S', 'A', 'D', 'M', '1'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ValidationError("truncated parameter blob");
  return v;
}

std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : module.named_parameters(true)) out.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers(true)) out.emplace_back(item.key(), item.value());
  return out;
}

void put_tensor(std::ostream& os, const torch::Tensor& t) {
  const auto data = t.detach().to(torch::kFloat32).contiguous();
  os.write(reinterpret_cast<const char*>(data.data_ptr<float>()), static_cast<std::streamsize>(data.numel() * 4));
}

torch::Tensor get_tensor(std::istream& is, const torch::Tensor& like) {
  auto t = torch::empty(like.sizes(), torch::kFloat32);
  is.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * 4));
  if (!is) throw ValidationError("truncated optimizer state");
  return t.to(like.options());
}

std::vector<torch::Tensor> ordered_params(torch::optim::Adam& optimizer) {
  std::vector<torch::Tensor> out;
  for (auto& group : optimizer.param_groups()) {
    for (auto& p : group.params()) out.push_back(p);
  }
  return out;
}

}  // namespace

void write_adam_state(const std::filesystem::path& path, torch::optim::Adam& optimizer) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  const auto params = ordered_params(optimizer);
  os.write(kAdamMagic, sizeof(kAdamMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  auto& state = optimizer.state();
  for (const auto& p : params) {
    const auto it = state.find(p.unsafeGetTensorImpl());
    put<std::uint8_t>(os, it != state.end());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    put<std::int64_t>(os, s.step());
    const bool amsgrad = s.max_exp_avg_sq().defined();
    put<std::uint8_t>(os, amsgrad);
    put_tensor(os, s.exp_avg());
    put_tensor(os, s.exp_avg_sq());
    if (amsgrad) put_tensor(os, s.max_exp_avg_sq());
  }
  if (!os) throw Error("write failed: " + path.string());
}

void read_adam_state(const std::filesystem::path& path, torch::optim::Adam& optimizer) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("missing optimizer state " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kAdamMagic, sizeof(kAdamMagic)) != 0) throw ValidationError("not an optimizer state: " + path.string());
  const auto params = ordered_params(optimizer);
  if (get<std::uint32_t>(is) != params.size()) throw ValidationError("optimizer state has a different parameter count");
  auto& state = optimizer.state();
  state.clear();
  for (const auto& p : params) {
    if (!get<std::uint8_t>(is)) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(get<std::int64_t>(is));
    const bool amsgrad = get<std::uint8_t>(is);
    s->exp_avg(get_tensor(is, p));
    s->exp_avg_sq(get_tensor(is, p));
    if (amsgrad) s->max_exp_avg_sq(get_tensor(is, p));
    state[p.unsafeGetTensorImpl()] = std::move(s);
  }
}

void write_parameter_blob(const std::filesystem::path& path, const torch::nn::Module& module) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + path.string());
  const auto state = named_state(module);
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, tensor] : state) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.dim()));
    for (long d : tensor.sizes()) put<std::int64_t>(os, d);
    const auto data = tensor.detach().to(torch::kFloat32).contiguous();
    os.write(reinterpret_cast<const char*>(data.data_ptr<float>()), static_cast<std::streamsize>(data.numel() * 4));
  }
  if (!os) throw Error("write failed: " + path.string());
}

void read_parameter_blob(const std::filesystem::path& path, torch::nn::Module& module) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("missing parameter blob " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ValidationError("not a parameter blob: " + path.string());
  const auto count = get<std::uint32_t>(is);
  std::map<std::string, torch::Tensor> loaded;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto ndim = get<std::uint32_t>(is);
    std::vector<long> dims(ndim);
    for (auto& d : dims) d = get<std::int64_t>(is);
    auto t = torch::empty(dims, torch::kFloat32);
    is.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(t.numel() * 4));
    if (!is) throw ValidationError("truncated parameter blob " + path.string());
    loaded.emplace(std::move(name), std::move(t));
  }
  torch::NoGradGuard no_grad;
  for (auto& [name, tensor] : named_state(module)) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw ValidationError("parameter blob lacks tensor '" + name + "'");
    if (it->second.sizes() != tensor.sizes()) throw ValidationError("shape mismatch for tensor '" + name + "'");
    tensor.copy_(it->second.to(tensor.dtype()));
  }
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<std::pair<long, double>>& losses) {
  std::ofstream os(path, std::ios::trunc);
  os << "step,loss\n";
  char buf[64];
  for (const auto& [step, loss] : losses) {
    std::snprintf(buf, sizeof(buf), "%ld,%.9g\n", step, loss);
    os << buf;
  }
}

void save_checkpoint(const std::filesystem::path& dir, const torch::nn::Module& module,
                     torch::optim::Adam* optimizer, const Checkpoint& checkpoint) {
  std::filesystem::create_directories(dir);
  write_parameter_blob(dir / "params.bin", module);
  if (optimizer) write_adam_state(dir / "optimizer.bin", *optimizer);
  std::ofstream os(dir / "meta.json", std::ios::trunc);
  os << checkpoint.meta.dump(2) << "\n";
  write_loss_csv(dir / "loss.csv", checkpoint.losses);
}

nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir) {
  std::ifstream is(dir / "meta.json");
  if (!is) throw MissingArtifact("no checkpoint at " + dir.string());
  try {
    nlohmann::json j;
    is >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("cannot parse " + (dir / "meta.json").string() + ": " + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir, torch::nn::Module& module,
                           torch::optim::Adam* optimizer) {
  Checkpoint ck;
  ck.meta = read_checkpoint_meta(dir);
  read_parameter_blob(dir / "params.bin", module);
  if (optimizer && std::filesystem::exists(dir / "optimizer.bin")) read_adam_state(dir / "optimizer.bin", *optimizer);
  std::ifstream ls(dir / "loss.csv");
  std::string line;
  std::getline(ls, line);
  while (std::getline(ls, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    ck.losses.emplace_back(std::stol(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
  }
  return ck;
}

}  // namespace synstitch
