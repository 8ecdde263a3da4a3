#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sgt {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between tensors.
struct DimensionError : Error { using Error::Error; };
// Caller broke a documented precondition.
struct ContractError : Error { using Error::Error; };
// Invalid model/run/generator configuration.
struct ConfigError : Error { using Error::Error; };
// File is not syntactically a valid artifact of its format.
struct ParseError : Error { using Error::Error; };
// File parsed but disagrees with the expected schema (dims, names, versions).
struct SchemaError : Error { using Error::Error; };
// NaN/Inf detected by a debug-mode numeric check.
struct NumericFault : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

uint64_t fnv1a64(const void* data, size_t len,
                 uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(const std::vector<double>& v,
                 uint64_t seed = 0xcbf29ce484222325ull);
std::string to_hex(uint64_t v);

std::string base64_encode(const void* data, size_t len);
std::vector<uint8_t> base64_decode(std::string_view s);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);

}  // namespace sgt
