#include "cpdnet/model.hpp"

#include "cpdnet/errors.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cpdnet {

namespace {

ConvSpec make_spec(int in_c, int out_c, int k, int stride = 1, int padding = 0,
                   int dilation = 1, int groups = 1) {
  ConvSpec s;
  s.in_channels = in_c;
  s.out_channels = out_c;
  s.kh = s.kw = k;
  s.stride = stride;
  s.padding = padding;
  s.dilation = dilation;
  s.groups = groups;
  return s;
}

}  // namespace

void BackboneConfig::validate() const {
  if (base_channels != 16 && base_channels != 32 && base_channels != 64) {
    throw std::invalid_argument("BackboneConfig: base_channels must be 16, 32 or 64, got " +
                                std::to_string(base_channels));
  }
  if (blocks_per_stage != 4) {
    throw std::invalid_argument("BackboneConfig: blocks_per_stage is fixed at 4");
  }
  for (int c : stage_channels()) {
    if (c % 4 != 0) {
      throw std::invalid_argument("BackboneConfig: stage channel count " + std::to_string(c) +
                                  " not divisible by 4");
    }
  }
}

MsemModule::MsemModule(ParamRegistry& reg, const std::string& name, int ch, Rng& rng)
    : channels(ch) {
  if (channels % 4 != 0) {
    throw std::invalid_argument("MsemModule: channels " + std::to_string(channels) +
                                " not divisible by 4");
  }
  const int quarter = channels / 4;
  for (int i = 0; i < 4; ++i) {
    const int r = i + 1;  // dilation rates 1..4
    compress[i] = Conv2d(reg, name + ".branch" + std::to_string(r) + ".compress",
                         make_spec(channels, quarter, 1), true, rng);
    dilated[i] = Conv2d(reg, name + ".branch" + std::to_string(r) + ".dilated",
                        make_spec(quarter, quarter, 3, 1, r, r), true, rng);
  }
  fuse = Conv2d(reg, name + ".fuse", make_spec(channels, channels, 1), true, rng);
  const int se_mid = std::max(1, channels / 16);
  se_squeeze = Conv2d(reg, name + ".se.squeeze", make_spec(channels, se_mid, 1), true, rng);
  se_expand = Conv2d(reg, name + ".se.expand", make_spec(se_mid, channels, 1), true, rng);
}

Tensor MsemModule::branch_forward(int idx, const Tensor& x) const {
  return relu(dilated[idx].forward(relu(compress[idx].forward(x))));
}

Tensor MsemModule::forward(const Tensor& x) const {
  if (x.shape().c != channels) {
    throw std::invalid_argument("MsemModule: input channels " + std::to_string(x.shape().c) +
                                " != module channels " + std::to_string(channels));
  }
  std::vector<Tensor> outs;
  outs.reserve(4);
  for (int i = 0; i < 4; ++i) outs.push_back(branch_forward(i, x));
  Tensor fused = fuse.forward(concat_channels(outs));
  Tensor gate = sigmoid(se_expand.forward(relu(se_squeeze.forward(global_avg_pool(fused)))));
  return add(x, scale_channels(fused, gate));
}

DrcDecoder::DrcDecoder(ParamRegistry& reg, const std::string& name, int ch, Rng& rng)
    : channels(ch) {
  if (channels % 2 != 0) {
    throw std::invalid_argument("DrcDecoder: channels must be even, got " +
                                std::to_string(channels));
  }
  const int half = channels / 2;
  conv3_a = Conv2d(reg, name + ".sub1.conv3", make_spec(channels, half, 3, 1, 1), true, rng);
  bn3_a = BatchNorm2d(reg, name + ".sub1.bn3", half);
  conv1_a = Conv2d(reg, name + ".sub1.conv1", make_spec(half, channels, 1), true, rng);
  bn1_a = BatchNorm2d(reg, name + ".sub1.bn1", channels);
  conv3_b = Conv2d(reg, name + ".sub2.conv3", make_spec(channels, half, 3, 1, 1), true, rng);
  bn3_b = BatchNorm2d(reg, name + ".sub2.bn3", half);
  conv1_b = Conv2d(reg, name + ".sub2.conv1", make_spec(half, channels, 1), true, rng);
  bn1_b = BatchNorm2d(reg, name + ".sub2.bn1", channels);
}

Tensor DrcDecoder::forward(const Tensor& x, bool training) {
  if (x.shape().c != channels) {
    throw std::invalid_argument("DrcDecoder: input channels " + std::to_string(x.shape().c) +
                                " != decoder channels " + std::to_string(channels));
  }
  Tensor y = relu(bn3_a.forward(conv3_a.forward(x), training));
  y = relu(bn1_a.forward(conv1_a.forward(y), training));
  Tensor r1 = add(x, y);
  Tensor z = relu(bn3_b.forward(conv3_b.forward(r1), training));
  z = relu(bn1_b.forward(conv1_b.forward(z), training));
  return add(x, z);
}

ConvNextV2Block::ConvNextV2Block(ParamRegistry& reg, const std::string& name, int ch,
                                 Rng& rng)
    : channels(ch) {
  dw = Conv2d(reg, name + ".dw", make_spec(channels, channels, 7, 1, 3, 1, channels), true, rng);
  const Shape chan{1, channels, 1, 1};
  ln_gamma = reg.add_parameter(name + ".ln.gamma", Tensor::full(chan, 1.0f)).value;
  ln_beta = reg.add_parameter(name + ".ln.beta", Tensor::zeros(chan)).value;
  expand = Conv2d(reg, name + ".expand", make_spec(channels, 4 * channels, 1), true, rng);
  const Shape wide{1, 4 * channels, 1, 1};
  grn_gamma = reg.add_parameter(name + ".grn.gamma", Tensor::zeros(wide)).value;
  grn_beta = reg.add_parameter(name + ".grn.beta", Tensor::zeros(wide)).value;
  project = Conv2d(reg, name + ".project", make_spec(4 * channels, channels, 1), true, rng);
}

Tensor ConvNextV2Block::forward(const Tensor& x) const {
  Tensor y = dw.forward(x);
  y = layer_norm_channels(y, ln_gamma, ln_beta);
  y = gelu(expand.forward(y));
  // Global response normalization: per-channel spatial L2 norm, divided by
  // its mean over channels, gates the activations; gamma/beta start at zero
  // so the whole term begins as a pass-through.
  Tensor msq = global_avg_pool(mul(y, y));
  Tensor gx = pow_scalar(add_scalar(msq, 1e-12f), 0.5f);
  Tensor nx = div_broadcast(gx, add_scalar(channel_mean(gx), 1e-6f));
  Tensor grn = add(channel_affine(scale_channels(y, nx), grn_gamma, grn_beta), y);
  return add(x, project.forward(grn));
}

CpdNetModel::CpdNetModel(const BackboneConfig& config, std::uint64_t seed)
    : config_(config), seed_(seed) {
  config_.validate();
  Rng rng(seed);
  const auto ch = config_.stage_channels();

  stem_ = Conv2d(registry_, "stem.conv", make_spec(3, ch[0], 3, 1, 1), true, rng);
  stem_bn_ = BatchNorm2d(registry_, "stem.bn", ch[0]);

  for (int s = 0; s < 4; ++s) {
    for (int b = 0; b < config_.blocks_per_stage; ++b) {
      stages_[s].emplace_back(registry_,
                              "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1),
                              ch[s], config_.branch_groups, rng);
    }
    if (s < 3) {
      transitions_[s] = Conv2d(registry_, "transition" + std::to_string(s + 1),
                               make_spec(ch[s], ch[s + 1], 3, 2, 1), true, rng);
      transition_bn_[s] =
          BatchNorm2d(registry_, "transition" + std::to_string(s + 1) + ".bn", ch[s + 1]);
    }
  }
  for (int s = 0; s < 4; ++s) {
    msem_[s] = MsemModule(registry_, "msem" + std::to_string(s + 1), ch[s], rng);
  }
  for (int s = 0; s < 4; ++s) {
    drc_[s] = DrcDecoder(registry_, "drc" + std::to_string(s + 1), ch[s], rng);
  }
  for (int s = 0; s < 3; ++s) {
    merge_proj_[s] = Conv2d(registry_, "merge_proj" + std::to_string(s + 1),
                            make_spec(ch[s + 1], ch[s], 1), true, rng);
  }
  lateral_embed_ = Conv2d(registry_, "lateral.embed", make_spec(3, ch[0], 3, 1, 1), true, rng);
  lateral_block_ = ConvNextV2Block(registry_, "lateral.block", ch[0], rng);
  head_ = Conv2d(registry_, "head", make_spec(2 * ch[0], 1, 1), true, rng);
}

Tensor CpdNetModel::forward(const Tensor& image, bool training, ForwardTrace* trace) {
  const Shape& s = image.shape();
  if (s.c != 3) {
    throw std::invalid_argument("CpdNetModel: expected 3 input channels, got " +
                                std::to_string(s.c));
  }
  if (s.h % 8 != 0 || s.w % 8 != 0) {
    const int ph = (8 - s.h % 8) % 8;
    const int pw = (8 - s.w % 8) % 8;
    throw std::invalid_argument(
        "CpdNetModel: spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
        " not divisible by 8; pad by " + std::to_string(ph) + " rows and " +
        std::to_string(pw) + " cols");
  }

  Tensor x = relu(stem_bn_.forward(stem_.forward(image), training));
  std::array<Tensor, 4> feats;
  for (int st = 0; st < 4; ++st) {
    for (auto& block : stages_[st]) x = block.forward(x, training);
    feats[st] = x;
    if (trace) trace->stage_shapes[st] = x.shape();
    if (st < 3) x = relu(transition_bn_[st].forward(transitions_[st].forward(x), training));
  }

  std::array<Tensor, 4> skips;
  for (int st = 0; st < 4; ++st) skips[st] = msem_[st].forward(feats[st]);

  Tensor d = drc_[3].forward(skips[3], training);
  for (int st = 2; st >= 0; --st) {
    Tensor up = merge_proj_[st].forward(upsample_bilinear(d, 2));
    d = drc_[st].forward(add(skips[st], up), training);
  }

  Tensor lat = lateral_block_.forward(lateral_embed_.forward(image));
  return sigmoid(head_.forward(concat_channels({lat, d})));
}

CpdNetModel build_model(const BackboneConfig& config, std::uint64_t seed) {
  return CpdNetModel(config, seed);
}

std::int64_t count_parameters(const CpdNetModel& model) {
  return model.registry().parameter_count();
}

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}
std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

constexpr char kMagic[4] = {'C', 'P', 'D', 'N'};

}  // namespace

void write_archive(const std::string& path, const Archive& archive) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("archive: cannot open '" + path + "' for writing");
  os.write(kMagic, 4);
  write_u32(os, archive.version);
  write_u32(os, archive.base_channels);
  write_u64(os, archive.seed);
  write_u32(os, static_cast<std::uint32_t>(archive.entries.size()));
  for (const auto& e : archive.entries) {
    write_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_u32(os, static_cast<std::uint32_t>(e.shape.n));
    write_u32(os, static_cast<std::uint32_t>(e.shape.c));
    write_u32(os, static_cast<std::uint32_t>(e.shape.h));
    write_u32(os, static_cast<std::uint32_t>(e.shape.w));
    write_u64(os, static_cast<std::uint64_t>(e.values.size()));
    os.write(reinterpret_cast<const char*>(e.values.data()),
             static_cast<std::streamsize>(e.values.size() * sizeof(float)));
  }
  if (!os) throw CheckpointError("archive: write to '" + path + "' failed");
}

Archive read_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("archive: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError("archive: '" + path + "' is not a checkpoint (bad magic)");
  }
  Archive a;
  a.version = read_u32(is);
  if (a.version != 1) {
    throw CheckpointError("archive: unsupported format version " + std::to_string(a.version));
  }
  a.base_channels = read_u32(is);
  a.seed = read_u64(is);
  const std::uint32_t count = read_u32(is);
  if (!is) throw CheckpointError("archive: truncated header in '" + path + "'");
  a.entries.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveEntry& e = a.entries[i];
    const std::uint32_t name_len = read_u32(is);
    if (!is || name_len > 4096) {
      throw CheckpointError("archive: corrupt entry header at index " + std::to_string(i));
    }
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    e.shape.n = static_cast<int>(read_u32(is));
    e.shape.c = static_cast<int>(read_u32(is));
    e.shape.h = static_cast<int>(read_u32(is));
    e.shape.w = static_cast<int>(read_u32(is));
    const std::uint64_t numel = read_u64(is);
    if (!is || numel != static_cast<std::uint64_t>(e.shape.numel())) {
      throw CheckpointError("archive: entry '" + e.name + "' has inconsistent size");
    }
    e.values.resize(numel);
    is.read(reinterpret_cast<char*>(e.values.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    if (!is) throw CheckpointError("archive: truncated data for entry '" + e.name + "'");
  }
  return a;
}

void save_checkpoint(const CpdNetModel& model, const std::string& path) {
  Archive a;
  a.version = 1;
  a.base_channels = static_cast<std::uint32_t>(model.config().base_channels);
  a.seed = model.seed();
  for (const auto& p : model.registry().parameters()) {
    a.entries.push_back({p.name, p.value.shape(), p.value.data()});
  }
  for (const auto& b : model.registry().buffers()) {
    a.entries.push_back({b.name, b.value.shape(), b.value.data()});
  }
  write_archive(path, a);
}

CpdNetModel load_checkpoint(const std::string& path) {
  Archive a = read_archive(path);
  BackboneConfig config;
  config.base_channels = static_cast<int>(a.base_channels);
  CpdNetModel model(config, a.seed);
  for (const auto& e : a.entries) {
    Parameter* p = model.registry().find(e.name);
    if (p == nullptr) {
      throw CheckpointError("checkpoint: unknown entry '" + e.name + "'");
    }
    if (!(p->value.shape() == e.shape)) {
      throw CheckpointError("checkpoint: entry '" + e.name + "' shape " + e.shape.str() +
                               " != model shape " + p->value.shape().str());
    }
    p->value.data() = e.values;
  }
  return model;
}

}  // namespace cpdnet
