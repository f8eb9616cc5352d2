#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace redguard {

using Rng = std::mt19937_64;

// Stored in place of -inf wherever a log-probability must survive JSON.
inline constexpr double kLogProbSentinel = -1e9;

std::uint64_t fnv1a64(std::string_view data, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::uint64_t splitmix64(std::uint64_t& state);

// Uniform in [0, 1) from the top 53 bits of one engine draw.
double uniform01(Rng& rng);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
// Plain cosine; zero-length vectors give 0. Result is clamped to [-1, 1].
double cosine(std::span<const double> a, std::span<const double> b);
void normalize_in_place(std::vector<double>& v);

// Probability of the first class under a two-way softmax.
double softmax2_first(double first, double second);
double log_sum_exp(std::span<const double> values);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string lowercase(std::string_view text);
std::string format_fixed2(double value);

}  // namespace redguard
