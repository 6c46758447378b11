#include "ctguard/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ctguard/error.hpp"
#include "ctguard/rng.hpp"

namespace ctguard {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const std::string t = trim(v);
  auto res = std::from_chars(t.data(), t.data() + t.size(), out);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

// Seed streams; distinct constants keep them independent.
constexpr std::uint64_t kInitStream = 0x1001;
constexpr std::uint64_t kRegionStream = 0x2002;
constexpr std::uint64_t kOrderStream = 0x3003;
constexpr std::uint64_t kWarmStream = 0x4004;
constexpr std::uint64_t kSurrogateStream = 0x5005;
constexpr std::uint64_t kPerturbStream = 0x6006;
constexpr std::uint64_t kPhantomStream = 0x7007;

void check_finite(double v, const char* term, std::uint64_t step) {
  if (!std::isfinite(v)) {
    throw TrainingError("non-finite " + std::string(term) + " at step " + std::to_string(step));
  }
}

template <typename T>
std::vector<double> to_double(const std::vector<T>& v) {
  return {v.begin(), v.end()};
}

template <typename T>
std::vector<T> from_double(const std::vector<double>& v) {
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
  return out;
}

Tensor<float> field_batch(const std::vector<Image>& fields) {
  std::vector<const Image*> ptrs;
  for (const Image& f : fields) ptrs.push_back(&f);
  return stack_images<float>(ptrs);
}

void store_adam(nn::Adam<float>& opt, const std::string& prefix, ArrayArchive& a) {
  const auto& params = opt.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<std::int64_t> shape(params[k]->shape.begin(), params[k]->shape.end());
    a.put(prefix + ".m." + params[k]->name, shape, opt.first_moments()[k]);
    a.put(prefix + ".v." + params[k]->name, shape, opt.second_moments()[k]);
  }
  a.put_i64(prefix + ".step", {opt.step_count()});
}

void load_adam(nn::Adam<float>& opt, const std::string& prefix, const ArrayArchive& a) {
  const auto& params = opt.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    opt.first_moments()[k] = a.f32(prefix + ".m." + params[k]->name);
    opt.second_moments()[k] = a.f32(prefix + ".v." + params[k]->name);
  }
  opt.set_step_count(a.i64(prefix + ".step").at(0));
}

const std::string kManipPrefix = "manipulator.";

}  // namespace

// ----------------------------------------------------------------- config

void TrainingConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in (0,1)");
  if (!std::isfinite(alpha) || alpha < 0.0) throw ConfigError("alpha must be finite and non-negative");
  if (!(perturbation_sigma > 0.0)) throw ConfigError("perturbation_sigma must be positive");
  if (trunk_width < 1 || residual_blocks < 0 || disc_base_width < 1) throw ConfigError("model widths must be positive");
  if (region_size < 2 || region_size % 2 != 0) throw ConfigError("region_size must be even and at least 2");
  if (warmup_steps < 0 || !(warmup_lr > 0.0)) throw ConfigError("warmup settings out of range");
  if (surrogate_epochs < 0 || surrogate_mask < 1 || surrogate_mask >= region_size || surrogate_patches < 1) {
    throw ConfigError("surrogate settings out of range");
  }
  if (phantom_volumes < 2 || phantom_slices < 1 || phantom_size < 64) throw ConfigError("phantom settings out of range");
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw ConfigError("train_ratio must lie in (0,1)");
  if (manipulator_kind == ManipulatorKind::kExternal && manipulator_weights.empty()) {
    throw ConfigError("manipulator_kind = external needs manipulator_weights");
  }
}

void TrainingConfig::set(const std::string& key_in, const std::string& value_in) {
  const std::string key = trim(key_in);
  const std::string v = trim(value_in);
  if (key == "epochs") epochs = parse_number<int>(key, v);
  else if (key == "batch_size") batch_size = parse_number<int>(key, v);
  else if (key == "learning_rate") learning_rate = parse_number<double>(key, v);
  else if (key == "beta1") beta1 = parse_number<double>(key, v);
  else if (key == "beta2") beta2 = parse_number<double>(key, v);
  else if (key == "adam_betas") {
    const auto comma = v.find(',');
    if (comma == std::string::npos) throw ConfigError("adam_betas expects 'b1,b2'");
    beta1 = parse_number<double>(key, v.substr(0, comma));
    beta2 = parse_number<double>(key, v.substr(comma + 1));
  } else if (key == "alpha") alpha = parse_number<double>(key, v);
  else if (key == "seed") seed = parse_number<std::uint64_t>(key, v);
  else if (key == "manipulator_kind") manipulator_kind = parse_manipulator_kind(v);
  else if (key == "manipulator_weights") manipulator_weights = v;
  else if (key == "perturbation_mode") perturbation_mode = parse_perturbation_mode(v);
  else if (key == "perturbation_sigma") perturbation_sigma = parse_number<double>(key, v);
  else if (key == "device_hint") device_hint = v;
  else if (key == "trunk_width") trunk_width = parse_number<int>(key, v);
  else if (key == "residual_blocks") residual_blocks = parse_number<int>(key, v);
  else if (key == "disc_base_width") disc_base_width = parse_number<int>(key, v);
  else if (key == "region_size") region_size = parse_number<int>(key, v);
  else if (key == "warmup_steps") warmup_steps = parse_number<int>(key, v);
  else if (key == "warmup_lr") warmup_lr = parse_number<double>(key, v);
  else if (key == "surrogate_epochs") surrogate_epochs = parse_number<int>(key, v);
  else if (key == "surrogate_mask") surrogate_mask = parse_number<int>(key, v);
  else if (key == "surrogate_patches") surrogate_patches = parse_number<int>(key, v);
  else if (key == "data") data = v;
  else if (key == "phantom_volumes") phantom_volumes = parse_number<int>(key, v);
  else if (key == "phantom_slices") phantom_slices = parse_number<int>(key, v);
  else if (key == "phantom_size") phantom_size = parse_number<int>(key, v);
  else if (key == "train_ratio") train_ratio = parse_number<double>(key, v);
  else if (key == "output_dir") output_dir = v;
  else throw ConfigError("unknown config key '" + key + "'");
}

std::map<std::string, std::string> TrainingConfig::fields() const {
  return {
      {"epochs", std::to_string(epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"learning_rate", fmt_double(learning_rate)},
      {"beta1", fmt_double(beta1)},
      {"beta2", fmt_double(beta2)},
      {"alpha", fmt_double(alpha)},
      {"seed", std::to_string(seed)},
      {"manipulator_kind", to_string(manipulator_kind)},
      {"manipulator_weights", manipulator_weights},
      {"perturbation_mode", to_string(perturbation_mode)},
      {"perturbation_sigma", fmt_double(perturbation_sigma)},
      {"device_hint", device_hint},
      {"trunk_width", std::to_string(trunk_width)},
      {"residual_blocks", std::to_string(residual_blocks)},
      {"disc_base_width", std::to_string(disc_base_width)},
      {"region_size", std::to_string(region_size)},
      {"warmup_steps", std::to_string(warmup_steps)},
      {"warmup_lr", fmt_double(warmup_lr)},
      {"surrogate_epochs", std::to_string(surrogate_epochs)},
      {"surrogate_mask", std::to_string(surrogate_mask)},
      {"surrogate_patches", std::to_string(surrogate_patches)},
      {"data", data},
      {"phantom_volumes", std::to_string(phantom_volumes)},
      {"phantom_slices", std::to_string(phantom_slices)},
      {"phantom_size", std::to_string(phantom_size)},
      {"train_ratio", fmt_double(train_ratio)},
      {"output_dir", output_dir},
  };
}

std::string TrainingConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : fields()) out += k + " = " + v + "\n";
  return out;
}

TrainingConfig TrainingConfig::parse(const std::string& text) {
  TrainingConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return cfg;
}

TrainingConfig TrainingConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

GeneratorSpec TrainingConfig::generator_spec() const {
  GeneratorSpec s;
  s.trunk_width = trunk_width;
  s.residual_blocks = residual_blocks;
  return s;
}

DiscriminatorSpec TrainingConfig::discriminator_spec() const {
  return DiscriminatorSpec::with_base_width(disc_base_width);
}

// ------------------------------------------------------------- checkpoint

ArrayArchive Checkpoint::to_archive() const {
  ArrayArchive a = state;
  for (const auto& [k, v] : config.fields()) a.manifest["config." + k] = v;
  a.manifest["epoch"] = std::to_string(epoch);
  a.manifest["format"] = "ctguard-checkpoint-1";
  return a;
}

Checkpoint Checkpoint::from_archive(const ArrayArchive& a) {
  if (a.manifest.count("format") == 0 || a.manifest.at("format") != "ctguard-checkpoint-1") {
    throw ArchiveError("manifest", "not a checkpoint (format tag missing)");
  }
  Checkpoint c;
  c.state = a;
  for (auto it = c.state.manifest.begin(); it != c.state.manifest.end();) {
    if (it->first.rfind("config.", 0) == 0) {
      try {
        c.config.set(it->first.substr(7), it->second);
      } catch (const ConfigError& e) {
        throw ArchiveError("manifest", e.what());
      }
      it = c.state.manifest.erase(it);
    } else {
      ++it;
    }
  }
  c.epoch = std::stoi(c.state.manifest.at("epoch"));
  c.state.manifest.erase("epoch");
  c.state.manifest.erase("format");
  return c;
}

ManipulatorHandle Checkpoint::manipulator() const {
  const std::string kind = state.manifest.count(kManipPrefix + "kind") ? state.manifest.at(kManipPrefix + "kind") : "";
  if (kind.empty()) throw ArchiveError("manifest", "checkpoint has no manipulator entry");
  const ManipulatorKind k = parse_manipulator_kind(kind);
  if (k == ManipulatorKind::kBlurBlend) return ManipulatorHandle::blur_blend();
  ArrayArchive w;
  for (const auto& [key, v] : state.manifest)
    if (key.rfind(kManipPrefix, 0) == 0) w.manifest[key.substr(kManipPrefix.size())] = v;
  for (const std::string& name : state.names_with_prefix(kManipPrefix)) {
    const NamedArray& arr = state.at(name);
    const std::string inner = name.substr(kManipPrefix.size());
    std::visit(
        [&](const auto& v) {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, std::vector<std::int64_t>>) w.put_i64(inner, v);
          else w.put(inner, arr.shape, v);
        },
        arr.data);
  }
  return ManipulatorHandle::network(k, std::move(w));
}

Perturbation Checkpoint::perturbation() const {
  const NamedArray& f = state.at("perturbation.field");
  const auto& meta = state.i64("perturbation.state");
  Perturbation p;
  p.field = Image(static_cast<int>(f.shape.at(0)), static_cast<int>(f.shape.at(1)));
  p.field.px = state.f64("perturbation.field");
  p.sigma = state.f64("perturbation.sigma").at(0);
  p.seed = static_cast<std::uint64_t>(meta.at(0));
  p.mode = meta.at(1) == 0 ? PerturbationMode::kFixedUniversal : PerturbationMode::kResampledPerBatch;
  p.draws = static_cast<std::uint64_t>(meta.at(2));
  return p;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) { c.to_archive().save(path); }

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IngestError("checkpoint not found: " + path.string());
  return Checkpoint::from_archive(ArrayArchive::load(path));
}

// -------------------------------------------------------------- objective

template <typename T>
LossBreakdown generator_objective(Discriminator<T>& d, DifferentiableManipulator<T>& m, const Tensor<T>& xp,
                                  const std::vector<TamperRegion>& regions, double alpha, Tensor<T>* grad_xp) {
  if (regions.size() != static_cast<std::size_t>(xp.n)) throw InvariantError("one tamper region per sample required");
  LossBreakdown lb;
  const bool had_grad = d.requires_grad();
  d.set_requires_grad(false);
  const std::vector<T> d_fake = d.forward(xp);
  lb.g_adv = generator_adversarial_loss(to_double(d_fake));
  if (grad_xp) *grad_xp = d.backward(from_double<T>(generator_adversarial_loss_grad(to_double(d_fake))));
  d.set_requires_grad(had_grad);

  const int s = regions.front().size;
  Tensor<T> q(xp.n, 1, s, s);
  for (int i = 0; i < xp.n; ++i) {
    const TamperRegion& r = regions[static_cast<std::size_t>(i)];
    check_region(r, xp.h, xp.w);
    if (r.size != s) throw InvariantError("tamper regions in one batch must share a size");
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) q.at(i, 0, y, x) = xp.at(i, 0, r.y0() + y, r.x0() + x);
  }
  const Tensor<T> mq = m.forward(q);
  // Outside the squares x_hat^p equals x^p, so the whole-image mean only
  // collects the squares.
  const double denom = static_cast<double>(xp.size());
  double sq = 0.0;
  Tensor<T> resid(q.n, 1, s, s);
  for (std::size_t k = 0; k < q.size(); ++k) {
    const double r = static_cast<double>(mq.data[k]) - static_cast<double>(q.data[k]);
    sq += r * r;
    resid.data[k] = static_cast<T>(r);
  }
  lb.l_m = sq / denom;
  lb.g_total = generator_total_loss(lb.g_adv, lb.l_m, LossWeights{alpha});
  if (!grad_xp) return lb;

  // d(-alpha * L_m)/dq = -alpha * (2 / denom) * (J_M^T r - r)
  const T coef = static_cast<T>(-alpha * 2.0 / denom);
  Tensor<T> g_mq(q.n, 1, s, s);
  for (std::size_t k = 0; k < q.size(); ++k) g_mq.data[k] = coef * resid.data[k];
  const Tensor<T> g_q_via_m = m.backward(g_mq);
  for (int i = 0; i < xp.n; ++i) {
    const TamperRegion& r = regions[static_cast<std::size_t>(i)];
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        grad_xp->at(i, 0, r.y0() + y, r.x0() + x) += g_q_via_m.at(i, 0, y, x) - g_mq.at(i, 0, y, x);
      }
  }
  return lb;
}

template LossBreakdown generator_objective<float>(Discriminator<float>&, DifferentiableManipulator<float>&,
                                                  const Tensor<float>&, const std::vector<TamperRegion>&, double,
                                                  Tensor<float>*);
template LossBreakdown generator_objective<double>(Discriminator<double>&, DifferentiableManipulator<double>&,
                                                   const Tensor<double>&, const std::vector<TamperRegion>&, double,
                                                   Tensor<double>*);

// ---------------------------------------------------------------- trainer

Trainer::Trainer(const TrainingConfig& cfg, const ManipulatorHandle& m, int height, int width) : cfg_(cfg), m_(m) {
  cfg_.validate();
  perturbation_ = sample_perturbation(height, width, cfg_.perturbation_sigma, mix_seed(cfg_.seed, kPerturbStream),
                                      cfg_.perturbation_mode);
  build(height, width);
  Rng rng(mix_seed(cfg_.seed, kInitStream));
  g_->init(rng);
  d_->init(rng);
}

Trainer::Trainer(const Checkpoint& c) : cfg_(c.config), m_(c.manipulator()), perturbation_(c.perturbation()) {
  build(perturbation_.field.h, perturbation_.field.w);
  load_parameters<float>(g_->parameters(), c.state);
  load_parameters<float>(d_->parameters(), c.state);
  load_adam(*opt_g_, "opt_g", c.state);
  load_adam(*opt_d_, "opt_d", c.state);
}

void Trainer::build(int height, int width) {
  if (height < cfg_.region_size || width < cfg_.region_size) {
    throw InvariantError("slices are smaller than the tamper region");
  }
  g_ = std::make_unique<Generator<float>>(cfg_.generator_spec());
  d_ = std::make_unique<Discriminator<float>>(cfg_.discriminator_spec());
  m_net_ = std::make_unique<DifferentiableManipulator<float>>(m_);
  const auto lr = static_cast<float>(cfg_.learning_rate);
  const auto b1 = static_cast<float>(cfg_.beta1);
  const auto b2 = static_cast<float>(cfg_.beta2);
  opt_g_ = std::make_unique<nn::Adam<float>>(lr, b1, b2);
  opt_d_ = std::make_unique<nn::Adam<float>>(lr, b1, b2);
  opt_g_->attach(g_->parameters());
  opt_d_->attach(d_->parameters());
}

LossBreakdown Trainer::train_step(const std::vector<const Image*>& batch, std::uint64_t step) {
  if (batch.empty()) throw InvariantError("empty training batch");
  const Tensor<float> x = stack_images<float>(batch);
  if (x.h != perturbation_.field.h || x.w != perturbation_.field.w) {
    throw InvariantError("batch is " + std::to_string(x.h) + "x" + std::to_string(x.w) + ", perturbation is " +
                         perturbation_.field.shape_str());
  }
  const Tensor<float> delta = field_batch(perturbation_for_batch(perturbation_, x.n));
  g_->set_training(true);
  d_->set_training(true);

  LossBreakdown lb;
  const Tensor<float> xp = g_->forward(x, delta);

  // Discriminator update on (x real, x^p fake); x^p is treated as a constant.
  opt_d_->zero_grad();
  d_->set_requires_grad(true);
  const std::vector<double> d_real = to_double(d_->forward(x));
  d_->backward(from_double<float>(discriminator_loss_grad_real(d_real)));
  const std::vector<double> d_fake = to_double(d_->forward(xp));
  d_->backward(from_double<float>(discriminator_loss_grad_fake(d_fake)));
  lb.d_loss = discriminator_loss(d_real, d_fake);
  check_finite(lb.d_loss, "d_loss", step);
  opt_d_->step();

  // Generator update. D only passes gradients through; M is frozen.
  opt_g_->zero_grad();
  Rng region_rng(mix_seed(mix_seed(cfg_.seed, kRegionStream), step));
  std::vector<TamperRegion> regions;
  for (int i = 0; i < x.n; ++i) regions.push_back(random_region(x.h, x.w, cfg_.region_size, region_rng));
  Tensor<float> grad_xp;
  const LossBreakdown g = generator_objective<float>(*d_, *m_net_, xp, regions, cfg_.alpha, &grad_xp);
  lb.g_adv = g.g_adv;
  lb.l_m = g.l_m;
  lb.g_total = g.g_total;
  check_finite(lb.g_adv, "g_adv", step);
  check_finite(lb.l_m, "l_m", step);
  check_finite(lb.g_total, "g_total", step);
  g_->backward(grad_xp);
  opt_g_->step();
  return lb;
}

void Trainer::warm_start(const std::vector<Image>& slices) {
  if (cfg_.warmup_steps == 0) return;
  if (slices.empty()) throw InvariantError("warm start needs slices");
  nn::Adam<float> opt(static_cast<float>(cfg_.warmup_lr), static_cast<float>(cfg_.beta1), static_cast<float>(cfg_.beta2));
  opt.attach(g_->parameters());
  g_->set_training(true);
  Rng rng(mix_seed(cfg_.seed, kWarmStream));
  // Sampling the perturbation here must not disturb the training stream.
  Perturbation p = perturbation_;
  for (int step = 0; step < cfg_.warmup_steps; ++step) {
    std::vector<const Image*> batch;
    for (int i = 0; i < cfg_.batch_size; ++i) batch.push_back(&slices[rng.below(slices.size())]);
    const Tensor<float> x = stack_images<float>(batch);
    const Tensor<float> delta = field_batch(perturbation_for_batch(p, x.n));
    opt.zero_grad();
    const Tensor<float> y = g_->forward(x, delta);
    Tensor<float> grad(y.n, y.c, y.h, y.w);
    const float scale = 2.0f / static_cast<float>(y.size());
    double loss = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
      const float r = y.data[k] - x.data[k];
      loss += static_cast<double>(r) * r;
      grad.data[k] = scale * r;
    }
    check_finite(loss, "warm-start loss", static_cast<std::uint64_t>(step));
    g_->backward(grad);
    opt.step();
  }
}

Checkpoint Trainer::checkpoint(int epoch) {
  Checkpoint c;
  c.config = cfg_;
  c.epoch = epoch;
  store_parameters<float>(g_->parameters(), c.state);
  store_parameters<float>(d_->parameters(), c.state);
  store_adam(*opt_g_, "opt_g", c.state);
  store_adam(*opt_d_, "opt_d", c.state);
  const Image& f = perturbation_.field;
  c.state.put("perturbation.field", {f.h, f.w}, f.px);
  c.state.put("perturbation.sigma", {1}, std::vector<double>{perturbation_.sigma});
  c.state.put_i64("perturbation.state",
                  {static_cast<std::int64_t>(perturbation_.seed),
                   perturbation_.mode == PerturbationMode::kFixedUniversal ? 0 : 1,
                   static_cast<std::int64_t>(perturbation_.draws)});
  c.state.manifest[kManipPrefix + "kind"] = to_string(m_.kind());
  if (m_.has_weights()) {
    const ArrayArchive& w = m_.weights();
    for (const auto& [k, v] : w.manifest) c.state.manifest[kManipPrefix + k] = v;
    for (const auto& [name, arr] : w.arrays()) {
      std::visit(
          [&](const auto& v) {
            using V = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<V, std::vector<std::int64_t>>) c.state.put_i64(kManipPrefix + name, v);
            else c.state.put(kManipPrefix + name, arr.shape, v);
          },
          arr.data);
    }
  }
  return c;
}

// -------------------------------------------------------------------- fit

int steps_per_epoch(std::size_t n, int batch_size) {
  return static_cast<int>((n + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(mix_seed(seed, kOrderStream), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

ManipulatorHandle resolve_manipulator(const TrainingConfig& cfg, const std::vector<Image>& slices) {
  switch (cfg.manipulator_kind) {
    case ManipulatorKind::kBlurBlend:
      return ManipulatorHandle::blur_blend();
    case ManipulatorKind::kExternal:
      return ManipulatorHandle::load(cfg.manipulator_weights);
    case ManipulatorKind::kInpaintSurrogate:
      if (!cfg.manipulator_weights.empty()) return ManipulatorHandle::load(cfg.manipulator_weights);
      SurrogateOptions opt;
      opt.patch_size = cfg.region_size;
      opt.mask_size = cfg.surrogate_mask;
      opt.patches_per_epoch = cfg.surrogate_patches;
      return train_inpaint_surrogate(slices, cfg.surrogate_epochs, mix_seed(cfg.seed, kSurrogateStream), opt);
  }
  throw ConfigError("unhandled manipulator kind");
}

Checkpoint fit(const std::vector<Image>& slices, const TrainingConfig& cfg, const FitHooks& hooks) {
  cfg.validate();
  if (slices.empty()) throw InvariantError("cannot fit on an empty dataset");
  return fit(slices, cfg, resolve_manipulator(cfg, slices), hooks);
}

Checkpoint fit(const std::vector<Image>& slices, const TrainingConfig& cfg, const ManipulatorHandle& m,
               const FitHooks& hooks) {
  cfg.validate();
  if (slices.empty()) throw InvariantError("cannot fit on an empty dataset");
  Trainer trainer(cfg, m, slices.front().h, slices.front().w);
  trainer.warm_start(slices);

  std::ofstream log;
  std::filesystem::path out;
  if (!cfg.output_dir.empty()) {
    out = cfg.output_dir;
    std::filesystem::create_directories(out);
    log.open(out / "train_log.csv");
    if (!log) throw Error("cannot write training log in " + out.string());
    log << "step,d_loss,g_adv,l_m,g_total\n";
    log.precision(9);
  }

  const int steps = steps_per_epoch(slices.size(), cfg.batch_size);
  std::uint64_t step = 0;
  Checkpoint last;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(slices.size(), cfg.seed, epoch);
    for (int s = 0; s < steps; ++s) {
      std::vector<const Image*> batch;
      const std::size_t begin = static_cast<std::size_t>(s) * cfg.batch_size;
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&slices[order[i]]);
      LossBreakdown lb;
      try {
        lb = trainer.train_step(batch, step);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", alpha " +
                            fmt_double(cfg.alpha) + ")");
      }
      if (log.is_open()) log << step << ',' << lb.d_loss << ',' << lb.g_adv << ',' << lb.l_m << ',' << lb.g_total << '\n';
      if (hooks.on_step) hooks.on_step(static_cast<std::int64_t>(step), lb);
      ++step;
    }
    last = trainer.checkpoint(epoch + 1);
    if (!out.empty()) save_checkpoint(last, out / ("checkpoint_epoch_" + std::to_string(epoch + 1) + ".mca"));
    if (hooks.on_epoch) hooks.on_epoch(epoch + 1, last);
  }
  if (!out.empty()) save_checkpoint(last, out / "checkpoint_final.mca");
  return last;
}

TrainingData load_training_data(const TrainingConfig& cfg) {
  std::vector<SliceRecord> all;
  std::vector<std::string> ids;
  if (cfg.data == "phantom") {
    for (int v = 0; v < cfg.phantom_volumes; ++v) {
      PhantomSpec spec;
      spec.size = cfg.phantom_size;
      spec.n_slices = cfg.phantom_slices;
      spec.seed = mix_seed(mix_seed(cfg.seed, kPhantomStream), static_cast<std::uint64_t>(v));
      CtVolume vol = generate_phantom(spec);
      vol.source_id = "phantom_" + std::to_string(v);
      ids.push_back(vol.source_id);
      for (SliceRecord& r : volume_to_slices(vol)) all.push_back(std::move(r));
    }
  } else {
    all = read_slice_cache(cfg.data);
    for (const SliceRecord& r : all)
      if (std::find(ids.begin(), ids.end(), r.volume_id) == ids.end()) ids.push_back(r.volume_id);
  }
  if (all.empty()) throw IngestError("no slices found for data source '" + cfg.data + "'");
  const DatasetSplit split = split_dataset(ids, cfg.train_ratio, cfg.seed);
  TrainingData td;
  for (SliceRecord& r : all) {
    const bool train = std::find(split.train_ids.begin(), split.train_ids.end(), r.volume_id) != split.train_ids.end();
    (train ? td.train : td.test).push_back(std::move(r));
  }
  return td;
}

// ---------------------------------------------------------------- protect

std::vector<Image> protect_slices(const std::vector<Image>& normalized, const Checkpoint& c) {
  if (normalized.empty()) return {};
  Generator<float> g(c.config.generator_spec());
  load_parameters<float>(g.parameters(), c.state);
  g.set_training(false);
  const Perturbation p = c.perturbation();
  std::vector<Image> out;
  out.reserve(normalized.size());
  constexpr std::size_t kChunk = 16;
  for (std::size_t b = 0; b < normalized.size(); b += kChunk) {
    std::vector<const Image*> batch, fields;
    for (std::size_t i = b; i < std::min(normalized.size(), b + kChunk); ++i) {
      if (!normalized[i].same_shape(p.field)) {
        throw InvariantError("slice " + std::to_string(i) + " is " + normalized[i].shape_str() +
                             ", checkpoint perturbation is " + p.field.shape_str());
      }
      batch.push_back(&normalized[i]);
      fields.push_back(&p.field);
    }
    const Tensor<float> y = g.forward(stack_images<float>(batch), stack_images<float>(fields));
    for (int i = 0; i < y.n; ++i) {
      Image im(y.h, y.w);
      auto s = y.sample(i);
      for (std::size_t k = 0; k < s.size(); ++k) im.px[k] = static_cast<double>(s[k]);
      out.push_back(std::move(im));
    }
  }
  return out;
}

CtVolume protect(const CtVolume& scan, const Checkpoint& c) {
  scan.validate();
  std::vector<Image> norm;
  for (const SliceRecord& r : volume_to_slices(scan)) norm.push_back(r.pixels);
  std::vector<Image> hu;
  for (const Image& im : protect_slices(norm, c)) hu.push_back(denormalize_slice(im));
  return slices_to_volume(hu, scan);
}

}  // namespace ctguard
