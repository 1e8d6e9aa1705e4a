// SPDX-License-Identifier: Apache-2.0
#include "heronet/checkpoint.hpp"

#include <iterator>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace heronet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path with_ext(const fs::path& stem, const char* ext) {
  fs::path p = stem;
  p += ext;
  return p;
}

void put_le32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

float get_le32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const fs::path& stem, const Checkpoint& ckpt) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  json manifest;
  manifest["stage"] = ckpt.stage;
  manifest["config"] = ckpt.config;
  manifest["seed"] = ckpt.seed;
  manifest["step"] = ckpt.step;
  manifest["tensors"] = json::array();
  std::string blob;
  blob.reserve(ckpt.params.count_values() * 4);
  ckpt.params.for_each([&](const Param<float>& p) {
    manifest["tensors"].push_back(
        {{"name", p.name}, {"rows", p.value.rows}, {"cols", p.value.cols}, {"offset", blob.size()}});
    for (float v : p.value.data) put_le32(blob, v);
  });
  manifest["blob_bytes"] = blob.size();

  // Write both files under temporary names so a failed save leaves any
  // previous checkpoint intact.
  const auto bin = with_ext(stem, ".bin"), js = with_ext(stem, ".json");
  const auto bin_tmp = with_ext(stem, ".bin.tmp"), js_tmp = with_ext(stem, ".json.tmp");
  {
    std::ofstream out(bin_tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + bin_tmp.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  {
    std::ofstream out(js_tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + js_tmp.string());
    out << manifest.dump(2) << '\n';
  }
  fs::rename(bin_tmp, bin);
  fs::rename(js_tmp, js);
}

Checkpoint load_checkpoint(const fs::path& stem) {
  const auto js = with_ext(stem, ".json"), bin = with_ext(stem, ".bin");
  std::ifstream min(js, std::ios::binary);
  if (!min) throw std::runtime_error("cannot read " + js.string());
  const json manifest = json::parse(min);
  std::ifstream bin_in(bin, std::ios::binary);
  if (!bin_in) throw std::runtime_error("cannot read " + bin.string());
  std::string blob((std::istreambuf_iterator<char>(bin_in)), std::istreambuf_iterator<char>());
  if (blob.size() != manifest.at("blob_bytes").get<std::size_t>())
    throw std::runtime_error("checkpoint " + stem.string() + ": blob length does not match manifest");

  Checkpoint c;
  c.stage = manifest.at("stage").get<std::string>();
  c.config = manifest.at("config");
  c.seed = manifest.at("seed").get<std::uint64_t>();
  c.step = manifest.at("step").get<long>();
  std::size_t expected = 0;
  for (const auto& t : manifest.at("tensors")) {
    const int rows = t.at("rows").get<int>(), cols = t.at("cols").get<int>();
    const auto offset = t.at("offset").get<std::size_t>();
    const std::size_t bytes = static_cast<std::size_t>(rows) * cols * 4;
    if (offset != expected || offset + bytes > blob.size())
      throw std::runtime_error("checkpoint " + stem.string() + ": inconsistent offset for " +
                               t.at("name").get<std::string>());
    Tensor<float> v(rows, cols);
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = get_le32(p + 4 * i);
    c.params.add(t.at("name").get<std::string>(), std::move(v));
    expected = offset + bytes;
  }
  if (expected != blob.size()) throw std::runtime_error("checkpoint " + stem.string() + ": trailing bytes in blob");
  return c;
}

bool checkpoint_exists(const fs::path& stem) {
  return fs::exists(with_ext(stem, ".json")) && fs::exists(with_ext(stem, ".bin"));
}

}  // namespace heronet
