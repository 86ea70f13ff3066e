#include "dkd/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

namespace dkd {

namespace {

constexpr char kMagic[8] = {'D', 'K', 'D', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::vector<unsigned char>& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw std::runtime_error("checkpoint: truncated blob section");
  const std::uint32_t v = static_cast<std::uint32_t>(in[pos]) |
                          (static_cast<std::uint32_t>(in[pos + 1]) << 8) |
                          (static_cast<std::uint32_t>(in[pos + 2]) << 16) |
                          (static_cast<std::uint32_t>(in[pos + 3]) << 24);
  pos += 4;
  return v;
}

void put_f32(std::vector<unsigned char>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

float get_f32(const std::vector<unsigned char>& in, std::size_t& pos) {
  const std::uint32_t bits = get_u32(in, pos);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out(2 * len, '0');
  for (unsigned int i = 0; i < len; ++i) {
    out[2 * i] = hex[md[i] >> 4];
    out[2 * i + 1] = hex[md[i] & 0xf];
  }
  return out;
}

void save_checkpoint(const std::string& path, const ModelGraph& model,
                     const CheckpointMeta& meta) {
  std::vector<unsigned char> blobs;
  for (const Tensor& p : model.parameters()) {
    const std::vector<int>& shape = p.shape();
    put_u32(blobs, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) put_u32(blobs, static_cast<std::uint32_t>(d));
    for (double v : p.values()) put_f32(blobs, static_cast<float>(v));
  }

  nlohmann::json manifest{
      {"format_version", meta.format_version},
      {"arch", to_string(model.arch_tag())},
      {"tap", model.tap()},
      {"mode", meta.mode},
      {"zeta", meta.zeta},
      {"seed", meta.seed},
      {"params", model.parameters().size()},
      {"blob_sha256", sha256_hex(blobs.data(), blobs.size())}};
  const std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(kMagic, sizeof kMagic);
  const std::uint32_t mlen = static_cast<std::uint32_t>(mtext.size());
  unsigned char lenb[4] = {static_cast<unsigned char>(mlen & 0xff),
                           static_cast<unsigned char>((mlen >> 8) & 0xff),
                           static_cast<unsigned char>((mlen >> 16) & 0xff),
                           static_cast<unsigned char>((mlen >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lenb), 4);
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  out.write(reinterpret_cast<const char*>(blobs.data()),
            static_cast<std::streamsize>(blobs.size()));
  if (!out) throw std::runtime_error("short write on checkpoint " + path);
}

ModelGraph load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw std::runtime_error("bad checkpoint magic in " + path);
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  if (!in) throw std::runtime_error("truncated checkpoint header in " + path);
  const std::uint32_t mlen = static_cast<std::uint32_t>(lenb[0]) |
                             (static_cast<std::uint32_t>(lenb[1]) << 8) |
                             (static_cast<std::uint32_t>(lenb[2]) << 16) |
                             (static_cast<std::uint32_t>(lenb[3]) << 24);
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), mlen);
  if (!in) throw std::runtime_error("truncated checkpoint manifest in " + path);
  std::vector<unsigned char> blobs((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("unreadable checkpoint manifest in " + path + ": " + e.what());
  }

  CheckpointMeta m;
  m.format_version = manifest.at("format_version").get<int>();
  if (m.format_version != 1)
    throw std::runtime_error("unsupported checkpoint format version in " + path);
  m.arch = arch_from_string(manifest.at("arch").get<std::string>());
  m.tap = manifest.at("tap").get<int>();
  m.mode = manifest.at("mode").get<std::string>();
  m.zeta = manifest.at("zeta").get<double>();
  m.seed = manifest.at("seed").get<std::uint64_t>();
  const std::size_t nparams = manifest.at("params").get<std::size_t>();
  if (manifest.at("blob_sha256").get<std::string>() != sha256_hex(blobs.data(), blobs.size()))
    throw std::runtime_error("checkpoint blob digest mismatch in " + path);

  ModelGraph model = build_model(m.arch, 0, m.tap);
  if (model.parameters().size() != nparams)
    throw std::runtime_error("checkpoint parameter count does not match architecture");

  std::size_t pos = 0;
  for (Tensor& p : model.parameters()) {
    const std::vector<int>& want = p.shape();
    const std::uint32_t ndims = get_u32(blobs, pos);
    if (ndims != want.size())
      throw std::runtime_error("checkpoint parameter rank mismatch in " + path);
    std::int64_t count = 1;
    for (std::uint32_t d = 0; d < ndims; ++d) {
      const std::uint32_t dim = get_u32(blobs, pos);
      if (static_cast<int>(dim) != want[d])
        throw std::runtime_error("checkpoint parameter shape mismatch in " + path);
      count *= dim;
    }
    std::vector<double>& dst = p.mutable_values();
    for (std::int64_t i = 0; i < count; ++i)
      dst[static_cast<std::size_t>(i)] = static_cast<double>(get_f32(blobs, pos));
  }
  if (pos != blobs.size())
    throw std::runtime_error("trailing bytes after checkpoint blobs in " + path);

  if (meta) *meta = m;
  return model;
}

}  // namespace dkd
