#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

#include "json.hpp"

namespace synstitch {

// Checkpoint directory layout:
//   params.bin    named float32 tensors (see write_parameter_blob)
//   optimizer.bin Adam step counts and moments (see write_adam_state)
//   meta.json     architecture, schedule, training step, RNG state
//   loss.csv      step,loss

/// Blob format: "SYNSTCK1", u32 count, then per tensor
/// u32 name length, name bytes, u32 ndim, i64 dims[ndim], float32 data (little-endian).
void write_parameter_blob(const std::filesystem::path& path, const torch::nn::Module& module);
/// Loads by name; every parameter and buffer of `module` must be present with a matching shape.
void read_parameter_blob(const std::filesystem::path& path, torch::nn::Module& module);

/// "SYNSADM1", u32 parameter count, then per parameter in param-group order: u8 has_state and, if set,
/// i64 step, u8 amsgrad, then exp_avg, exp_avg_sq (and max_exp_avg_sq) as float32. Byte-stable across runs,
/// unlike torch's archive, which orders state by tensor address.
void write_adam_state(const std::filesystem::path& path, torch::optim::Adam& optimizer);
void read_adam_state(const std::filesystem::path& path, torch::optim::Adam& optimizer);

struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<long, double>> losses;
};

void save_checkpoint(const std::filesystem::path& dir, const torch::nn::Module& module,
                     torch::optim::Adam* optimizer, const Checkpoint& checkpoint);
/// Reads meta.json and the parameter blob; restores the optimizer when given and present.
Checkpoint load_checkpoint(const std::filesystem::path& dir, torch::nn::Module& module,
                           torch::optim::Adam* optimizer = nullptr);
nlohmann::json read_checkpoint_meta(const std::filesystem::path& dir);

void write_loss_csv(const std::filesystem::path& path, const std::vector<std::pair<long, double>>& losses);

}  // namespace synstitch
