#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tsr/nn.hpp"

namespace tsr {

namespace {

using nlohmann::json;

void put_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw DataError("model file truncated");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

json layer_to_json(const LayerDef& d) {
  json j;
  j["kind"] = layer_kind_name(d.kind);
  j["inputs"] = d.inputs;
  if (!d.name.empty()) j["name"] = d.name;
  switch (d.kind) {
    case LayerKind::Conv:
      j["out_channels"] = d.conv.out_channels;
      j["kh"] = d.conv.kh;
      j["kw"] = d.conv.kw;
      j["stride"] = d.conv.stride;
      j["pad"] = d.conv.pad;
      j["dilation"] = d.conv.dilation;
      j["bias"] = d.conv.has_bias;
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      j["kernel"] = d.pool.kernel;
      j["stride"] = d.pool.stride;
      j["pad"] = d.pool.pad;
      break;
    case LayerKind::Fc:
      j["out"] = d.fc_out;
      j["in"] = d.fc_in;
      break;
    case LayerKind::AdaptiveMaxPool:
      j["target"] = d.adaptive_target;
      break;
    default:
      break;
  }
  return j;
}

LayerDef layer_from_json(const json& j) {
  LayerDef d;
  d.kind = layer_kind_from_name(j.at("kind").get<std::string>());
  d.inputs = j.at("inputs").get<std::vector<int>>();
  d.name = j.value("name", "");
  switch (d.kind) {
    case LayerKind::Conv:
      d.conv.out_channels = j.at("out_channels").get<int>();
      d.conv.kh = j.at("kh").get<int>();
      d.conv.kw = j.at("kw").get<int>();
      d.conv.stride = j.at("stride").get<int>();
      d.conv.pad = j.at("pad").get<int>();
      d.conv.dilation = j.at("dilation").get<int>();
      d.conv.has_bias = j.at("bias").get<bool>();
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      d.pool.kernel = j.at("kernel").get<int>();
      d.pool.stride = j.at("stride").get<int>();
      d.pool.pad = j.value("pad", 0);
      break;
    case LayerKind::Fc:
      d.fc_out = j.at("out").get<int>();
      d.fc_in = j.at("in").get<int>();
      break;
    case LayerKind::AdaptiveMaxPool:
      d.adaptive_target = j.at("target").get<int>();
      break;
    default:
      break;
  }
  return d;
}

void write_manifest_and_blobs(std::ostream& os, const char magic[4], const json& manifest,
                              const std::vector<const Tensor*>& blobs) {
  os.write(magic, 4);
  const std::string text = manifest.dump();
  put_u32le(os, std::uint32_t(text.size()));
  os.write(text.data(), std::streamsize(text.size()));
  for (const Tensor* t : blobs) write_tensor(os, *t);
  if (!os) throw DataError("model write failed");
}

json read_manifest(std::istream& is, const char magic[4], const char* what) {
  char m[4];
  is.read(m, 4);
  if (!is || std::memcmp(m, magic, 4) != 0) throw DataError(std::string("not a ") + what + " file");
  const std::uint32_t len = get_u32le(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw DataError(std::string(what) + " manifest truncated");
  return json::parse(text);
}

}  // namespace

void save_network(const std::string& path, const Network& net) {
  json manifest;
  manifest["version"] = kModelVersion;
  manifest["input_channels"] = net.input_channels();
  manifest["heads"] = net.heads();
  json layers = json::array();
  for (const LayerDef& d : net.layers()) layers.push_back(layer_to_json(d));
  manifest["layers"] = layers;

  std::vector<const Tensor*> blobs;
  for (std::size_t id = 0; id < net.layers().size(); ++id) {
    if (!net.has_params(int(id))) continue;
    blobs.push_back(&net.weights(int(id)));
    if (!net.bias(int(id)).empty()) blobs.push_back(&net.bias(int(id)));
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_manifest_and_blobs(os, "NNM1", manifest, blobs);
}

Network load_network(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  json manifest;
  try {
    manifest = read_manifest(is, "NNM1", "model");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("model manifest parse error: " + std::string(e.what()));
  }
  const std::string version = manifest.at("version").get<std::string>();
  if (version != kModelVersion)
    throw DataError("unsupported model version '" + version + "', expected '" + kModelVersion + "'");

  Network net;
  net.input_channels_ = manifest.at("input_channels").get<int>();
  for (const json& j : manifest.at("layers")) net.add(layer_from_json(j));
  for (int h : manifest.at("heads").get<std::vector<int>>()) net.mark_head(h);

  for (std::size_t id = 0; id < net.layers().size(); ++id) {
    const LayerDef& d = net.layers()[id];
    if (d.kind == LayerKind::Conv) {
      net.w_[id] = read_tensor(is);
      if (d.conv.has_bias) net.b_[id] = read_tensor(is);
      if (net.w_[id].n() != d.conv.out_channels || net.w_[id].h() != d.conv.kh ||
          net.w_[id].w() != d.conv.kw)
        throw DataError("model blob does not match layer spec at layer " + std::to_string(id));
    } else if (d.kind == LayerKind::Fc) {
      net.w_[id] = read_tensor(is);
      net.b_[id] = read_tensor(is);
      if (net.w_[id].n() != d.fc_out || net.w_[id].c() != d.fc_in)
        throw DataError("model blob does not match fc spec at layer " + std::to_string(id));
    } else {
      continue;
    }
    net.vw_[id] = Tensor(net.w_[id].shape());
    if (!net.b_[id].empty()) net.vb_[id] = Tensor(net.b_[id].shape());
  }
  return net;
}

void save_train_state(const std::string& path, const Network& net, const TrainState& st) {
  json manifest;
  manifest["version"] = kModelVersion;
  manifest["iteration"] = st.iteration;
  manifest["rng"] = st.rng_state;
  std::vector<const Tensor*> blobs;
  for (std::size_t id = 0; id < net.layers().size(); ++id) {
    if (!net.has_params(int(id))) continue;
    blobs.push_back(&net.velocity_w(int(id)));
    if (!net.bias(int(id)).empty()) blobs.push_back(&net.velocity_b(int(id)));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_manifest_and_blobs(os, "NNS1", manifest, blobs);
}

TrainState load_train_state(const std::string& path, Network& net) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  json manifest = read_manifest(is, "NNS1", "training state");
  TrainState st;
  st.iteration = manifest.at("iteration").get<long>();
  st.rng_state = manifest.at("rng").get<std::string>();
  for (std::size_t id = 0; id < net.layers().size(); ++id) {
    if (!net.has_params(int(id))) continue;
    net.velocity_w(int(id)) = read_tensor(is);
    if (!net.bias(int(id)).empty()) net.velocity_b(int(id)) = read_tensor(is);
  }
  return st;
}

}  // namespace tsr
