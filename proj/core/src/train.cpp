#include <cmath>
#include <sstream>

#include "halluc/error.hpp"
#include "halluc/io.hpp"
#include "halluc/model.hpp"
#include "json.hpp"

namespace halluc {

using nlohmann::json;

double memorization_rate(const LanguageModel& model, const Corpus& corpus) {
  if (corpus.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& pair : corpus) hits += model.decodes_to(pair.question, pair.truthful_answer);
  return static_cast<double>(hits) / static_cast<double>(corpus.size());
}

namespace {

std::string describe_optimizer(const TrainConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "adam(lr=" << cfg.learning_rate << ",beta1=" << cfg.beta1 << ",beta2=" << cfg.beta2
     << ",eps=" << cfg.epsilon << ",full_batch)";
  return os.str();
}

std::string describe_schedule(const TrainConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "min_steps=" << cfg.min_steps << ",max_steps=" << cfg.max_steps << ",eval_every=" << cfg.eval_every
     << ",target_rate=" << cfg.target_rate;
  return os.str();
}

}  // namespace

TrainResult train_lm(const Corpus& corpus, const ModelConfig& model_cfg, const TrainConfig& cfg) {
  if (corpus.empty()) throw ValidationError("train: corpus is empty");
  if (cfg.max_steps == 0 || cfg.eval_every == 0) throw ValidationError("train: step counts must be positive");

  TinyLM model(model_cfg, cfg.seed);
  const SpecialTokens& sp = model.special();
  std::vector<TokenSequence> sequences;
  for (const auto& pair : corpus) {
    TokenSequence seq = {sp.bos};
    seq.insert(seq.end(), pair.question.begin(), pair.question.end());
    seq.push_back(sp.sep);
    seq.insert(seq.end(), pair.truthful_answer.begin(), pair.truthful_answer.end());
    if (seq.size() - 1 > model_cfg.context) {
      throw ValidationError("train: a training sequence of " + std::to_string(seq.size()) +
                            " tokens does not fit context " + std::to_string(model_cfg.context));
    }
    sequences.push_back(std::move(seq));
  }

  Params first_moment = Params::zeros(model_cfg);
  Params second_moment = Params::zeros(model_cfg);
  auto m_tensors = first_moment.named();
  auto v_tensors = second_moment.named();
  auto p_tensors = model.mutable_params().named();

  const double batch_scale = 1.0 / static_cast<double>(sequences.size());
  double loss = 0.0;
  double rate = 0.0;
  std::size_t step = 0;
  Params grads = Params::zeros(model_cfg);
  auto g_tensors = grads.named();
  while (step < cfg.max_steps) {
    ++step;
    for (auto& [name, g] : g_tensors) g->fill(0.0);
    loss = 0.0;
    for (const auto& seq : sequences) {
      loss += model.sequence_loss_and_grad(seq, grads, batch_scale) * batch_scale;
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t t = 0; t < p_tensors.size(); ++t) {
      auto& p = p_tensors[t].second->values();
      auto& m = m_tensors[t].second->values();
      auto& v = v_tensors[t].second->values();
      const auto& g = g_tensors[t].second->values();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        p[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.epsilon);
      }
    }
    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      rate = memorization_rate(model, corpus);
      if (step >= cfg.min_steps && rate >= cfg.target_rate) break;
    }
  }

  TrainingInfo& info = model.training_info();
  info.seed = cfg.seed;
  info.optimizer = describe_optimizer(cfg);
  info.schedule = describe_schedule(cfg);
  info.steps = step;
  info.final_loss = loss;
  info.memorization_rate = rate;
  return TrainResult{std::move(model), rate, loss, step, rate < cfg.target_rate};
}

std::string checkpoint_to_json(const TinyLM& model, const Vocab& vocab) {
  const ModelConfig& c = model.config();
  if (vocab.size() != c.vocab_size) throw ValidationError("checkpoint: vocabulary size does not match model");
  const TrainingInfo& info = model.training_info();
  json tensors = json::array();
  for (const auto& [name, m] : model.params().named()) {
    tensors.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}, {"data", m->values()}});
  }
  json j = {
      {"format", "halluc-checkpoint"},
      {"version", 1},
      {"config",
       {{"vocab_size", c.vocab_size},
        {"d_model", c.d_model},
        {"n_layers", c.n_layers},
        {"n_heads", c.n_heads},
        {"context", c.context},
        {"d_ff", c.d_ff}}},
      {"vocab", vocab.tokens()},
      {"vocab_hash", hex64(vocab.hash())},
      {"training",
       {{"seed", info.seed},
        {"optimizer", info.optimizer},
        {"schedule", info.schedule},
        {"corpus_digest", info.corpus_digest},
        {"steps", info.steps},
        {"final_loss", info.final_loss},
        {"memorization_rate", info.memorization_rate}}},
      {"tensors", std::move(tensors)},
  };
  return j.dump() + "\n";
}

std::pair<TinyLM, Vocab> checkpoint_from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    if (j.value("format", "") != "halluc-checkpoint") throw ValidationError("checkpoint: unknown format");
    if (j.at("version").get<int>() != 1) throw ValidationError("checkpoint: unsupported version");
    const json& jc = j.at("config");
    ModelConfig cfg;
    cfg.vocab_size = jc.at("vocab_size").get<std::size_t>();
    cfg.d_model = jc.at("d_model").get<std::size_t>();
    cfg.n_layers = jc.at("n_layers").get<std::size_t>();
    cfg.n_heads = jc.at("n_heads").get<std::size_t>();
    cfg.context = jc.at("context").get<std::size_t>();
    cfg.d_ff = jc.at("d_ff").get<std::size_t>();
    cfg.validate();

    Vocab vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
    if (vocab.size() != cfg.vocab_size) throw ValidationError("checkpoint: vocabulary size mismatch");
    if (hex64(vocab.hash()) != j.at("vocab_hash").get<std::string>()) {
      throw ValidationError("checkpoint: vocabulary hash mismatch");
    }

    Params params = Params::zeros(cfg);
    auto named = params.named();
    const json& jt = j.at("tensors");
    if (jt.size() != named.size()) throw ValidationError("checkpoint: wrong number of tensors");
    for (std::size_t i = 0; i < named.size(); ++i) {
      const json& t = jt.at(i);
      auto& [name, m] = named[i];
      if (t.at("name").get<std::string>() != name) {
        throw ValidationError("checkpoint: expected tensor '" + name + "'");
      }
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2 || shape[0] != m->rows() || shape[1] != m->cols()) {
        throw ValidationError("checkpoint: tensor '" + name + "' has the wrong shape");
      }
      auto data = t.at("data").get<std::vector<double>>();
      if (data.size() != m->size()) throw ValidationError("checkpoint: tensor '" + name + "' has wrong size");
      m->values() = std::move(data);
    }
    TinyLM model(cfg, std::move(params));
    const json& tr = j.at("training");
    TrainingInfo& info = model.training_info();
    info.seed = tr.at("seed").get<std::uint64_t>();
    info.optimizer = tr.at("optimizer").get<std::string>();
    info.schedule = tr.value("schedule", "");
    info.corpus_digest = tr.value("corpus_digest", "");
    info.steps = tr.at("steps").get<std::size_t>();
    info.final_loss = tr.at("final_loss").get<double>();
    info.memorization_rate = tr.at("memorization_rate").get<double>();
    return {std::move(model), std::move(vocab)};
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const TinyLM& model, const Vocab& vocab) {
  write_file_atomic(path, checkpoint_to_json(model, vocab));
}

std::pair<TinyLM, Vocab> load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json(read_file(path));
}

}  // namespace halluc
