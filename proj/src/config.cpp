#include "transmpc/config.hpp"

#include <fstream>

namespace transmpc {

const char* kVersion = "transmpc 0.1.0";

namespace {

nlohmann::json default_config(const std::string& task) {
  using json = nlohmann::json;
  const bool robot = task == "robot";
  json j;
  j["task"] = robot ? "robot" : "vehicle";
  j["seed"] = 0;
  j["dt"] = 0.1;
  j["vehicle"] = {{"m", 1412.0},      {"I_z", 1536.7},
                  {"l_f", 1.06},      {"l_r", 1.85},
                  {"k_f", -128916.0}, {"k_r", -85944.0},
                  {"v_floor", 0.1}};
  j["robot"] = {{"f", 10.0}};
  // The printed running cost squares the longitudinal speed in its 0.1*v^2
  // regularizer, which puts an N-proportional floor under every trajectory
  // that tracks a nonzero reference speed. The vehicle profiles use the
  // lateral-velocity variant instead, the only reading whose magnitudes are
  // reproducible; "longitudinal" switches back to the printed form.
  j["cost"] = {{"w_px", 0.2},
               {"w_py", 0.3},
               {"w_phi", 0.2},
               {"w_v", 0.3},
               {"w_speed", 0.1},
               {"w_omega", 0.1},
               {"w_in0", 0.05},
               {"w_in1", 0.05},
               {"speed_reg", robot ? "longitudinal" : "lateral"},
               {"collision", robot ? "clipped" : "quadratic"},
               {"collision_weight", robot ? 8.0 : 1.0},
               {"r_ego", 0.35},
               {"r_obstacle", 0.2},
               {"r_safe", 0.1}};
  j["scenario"] = {
      {"speed", robot ? 0.4 : 5.0},
      {"train_mix", robot ? json::array({"line"})
                          : json::array({"sine", "dlc"})},
      {"eval", robot ? "line" : "sine"},
      {"sine", {{"amplitude", 1.0}, {"wavelength", 50.0}}},
      {"dlc",
       {{"offset", 1.0}, {"ramp_length", 10.0}, {"plateau", 15.0},
        {"start_x", 15.0}}}};
  j["policy"] = {{"arch", "transformer"},
                 {"d_embed", 32},
                 {"n_heads", 2},
                 {"n_layers", 1},
                 {"d_ffn", 32},
                 {"N_max", 20},
                 {"mlp_width", 32},
                 {"mlp_horizon", 20},
                 {"pos_scale", robot ? 2.0 : 10.0},
                 {"v_nom", robot ? 0.4 : 5.0}};
  j["train"] = {{"iterations", 2000},
                {"episode_length", 50},
                {"minibatch", 128},
                {"buffer_capacity", 20000},
                {"lr", 1e-3},
                {"beta1", 0.9},
                {"beta2", 0.999},
                {"eps", 1e-8},
                {"checkpoint_every", 500},
                {"threads", 1},
                {"concurrent", false},
                {"store_initial_state", false},
                {"reset",
                 {{"lateral", robot ? 0.3 : 1.0},
                  {"heading", 0.3},
                  {"speed_dev", robot ? 0.1 : 1.0},
                  {"path_span", 400},
                  {"obstacle_min_ahead", 20},
                  {"obstacle_max_ahead", 80}}}};
  j["oracle"] = {{"tol", 1e-8},
                 {"max_iters", 2000},
                 {"restarts", 8},
                 {"lbfgs_memory", 10}};
  j["eval"] = {{"n_states", 200},
               {"steps", 170},
               {"divergence_abort", 5.0},
               {"max_oracle_failure_rate", 0.1},
               {"bench_repetitions", 200},
               {"threads", 2},
               {"accuracy_horizon", 20},
               {"first_element_horizons", json::array()},
               {"closed_loop_horizons", json::array({5, 20})},
               {"bench_horizons", json::array({1, 5, 10, 15, 20})},
               {"obstacle_step", 85}};
  return j;
}

void check_against_schema(const nlohmann::json& data,
                          const nlohmann::json& schema,
                          const std::string& prefix) {
  for (const auto& [key, value] : data.items()) {
    if (!schema.contains(key))
      throw ConfigError("unknown config key: " +
                        (prefix.empty() ? key : prefix + "." + key));
    const auto& ref = schema.at(key);
    if (value.is_object() != ref.is_object())
      throw ConfigError("config key has wrong structure: " +
                        (prefix.empty() ? key : prefix + "." + key));
    if (value.is_object())
      check_against_schema(value, ref,
                           prefix.empty() ? key : prefix + "." + key);
  }
}

void merge_into(nlohmann::json& base, const nlohmann::json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object())
      merge_into(base[key], value);
    else
      base[key] = value;
  }
}

}  // namespace

Config Config::profile(const std::string& profile_name,
                       const std::string& task) {
  if (task != "vehicle" && task != "robot")
    throw ConfigError("unknown task: " + task);
  Config c;
  c.data_ = default_config(task);
  if (profile_name == "desk") {
    // defaults are the desk profile
  } else if (profile_name == "paper") {
    c.data_["policy"]["d_embed"] = 256;
    c.data_["policy"]["n_heads"] = 4;
    c.data_["policy"]["n_layers"] = 2;
    c.data_["policy"]["d_ffn"] = 256;
    c.data_["policy"]["mlp_width"] = 256;
    c.data_["train"]["iterations"] = 20000;
  } else {
    throw ConfigError("unknown profile: " + profile_name);
  }
  return c;
}

Config Config::build(const std::string& profile_name,
                     const std::string& config_path,
                     const std::vector<std::string>& overrides) {
  // the task key decides the defaults, so resolve it first
  std::string task = "vehicle";
  nlohmann::json file_json;
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw ConfigError("cannot open config file: " + config_path);
    try {
      is >> file_json;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file is not valid JSON: " +
                        std::string(e.what()));
    }
    if (file_json.contains("task"))
      task = file_json["task"].get<std::string>();
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq != std::string::npos && kv.substr(0, eq) == "task")
      task = kv.substr(eq + 1);
  }

  Config c = profile(profile_name, task);
  if (!file_json.is_null() && !config_path.empty()) {
    check_against_schema(file_json, c.data_, "");
    merge_into(c.data_, file_json);
  }
  for (const auto& kv : overrides) c.apply_override(kv);
  c.validate();
  return c;
}

void Config::merge_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file is not valid JSON: " +
                      std::string(e.what()));
  }
  check_against_schema(j, data_, "");
  merge_into(data_, j);
}

void Config::apply_override(const std::string& keyval) {
  const auto eq = keyval.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value: " + keyval);
  const std::string key = keyval.substr(0, eq);
  const std::string raw = keyval.substr(eq + 1);

  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // plain string
  }

  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (pos != std::string::npos) {
    const auto dot = key.find('.', pos);
    parts.push_back(key.substr(pos, dot == std::string::npos ? dot
                                                             : dot - pos));
    pos = dot == std::string::npos ? dot : dot + 1;
  }

  nlohmann::json* node = &data_;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]))
      throw ConfigError("unknown config key: " + key);
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back()))
    throw ConfigError("unknown config key: " + key);
  (*node)[parts.back()] = value;
}

void Config::validate() const {
  const nlohmann::json schema =
      default_config(data_.value("task", "vehicle"));
  check_against_schema(data_, schema, "");
}

std::string Config::hash() const {
  const std::string s = data_.dump();
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

bool Config::robot_task() const {
  return data_.at("task").get<std::string>() == "robot";
}

std::uint64_t Config::seed() const {
  return data_.at("seed").get<std::uint64_t>();
}

void Config::set_seed(std::uint64_t s) { data_["seed"] = s; }

double Config::dt() const { return data_.at("dt").get<double>(); }

BicycleParams Config::bicycle_params() const {
  const auto& v = data_.at("vehicle");
  BicycleParams p;
  p.m = v.at("m").get<double>();
  p.I_z = v.at("I_z").get<double>();
  p.l_f = v.at("l_f").get<double>();
  p.l_r = v.at("l_r").get<double>();
  p.k_f = v.at("k_f").get<double>();
  p.k_r = v.at("k_r").get<double>();
  p.v_floor = v.at("v_floor").get<double>();
  return p;
}

CostWeights Config::cost_weights() const {
  const auto& c = data_.at("cost");
  CostWeights w;
  w.w_px = c.at("w_px").get<double>();
  w.w_py = c.at("w_py").get<double>();
  w.w_phi = c.at("w_phi").get<double>();
  w.w_v = c.at("w_v").get<double>();
  w.w_speed = c.at("w_speed").get<double>();
  w.w_omega = c.at("w_omega").get<double>();
  w.w_in0 = c.at("w_in0").get<double>();
  w.w_in1 = c.at("w_in1").get<double>();
  const std::string sr = c.at("speed_reg").get<std::string>();
  if (sr != "longitudinal" && sr != "lateral")
    throw ConfigError("cost.speed_reg must be longitudinal or lateral");
  w.speed_reg =
      sr == "lateral" ? SpeedReg::kLateral : SpeedReg::kLongitudinal;
  const std::string col = c.at("collision").get<std::string>();
  if (col != "quadratic" && col != "clipped")
    throw ConfigError("cost.collision must be quadratic or clipped");
  w.collision = col == "clipped" ? CollisionTerm::kClipped
                                 : CollisionTerm::kQuadratic;
  w.collision_weight = c.at("collision_weight").get<double>();
  w.r_ego = c.at("r_ego").get<double>();
  w.r_obstacle = c.at("r_obstacle").get<double>();
  w.r_safe = c.at("r_safe").get<double>();
  return w;
}

Plant Config::plant() const {
  if (robot_task())
    return make_robot_plant(cost_weights(),
                            data_.at("robot").at("f").get<double>());
  return make_vehicle_plant(bicycle_params(), cost_weights(), dt());
}

Scenario Config::scenario_by_name(const std::string& name) const {
  const double speed = data_.at("scenario").at("speed").get<double>();
  if (name == "sine") {
    Scenario s = make_sine_scenario(speed, dt());
    s.amplitude =
        data_.at("scenario").at("sine").at("amplitude").get<double>();
    s.wavelength =
        data_.at("scenario").at("sine").at("wavelength").get<double>();
    return s;
  }
  if (name == "dlc") {
    Scenario s = make_dlc_scenario(speed, dt());
    const auto& d = data_.at("scenario").at("dlc");
    s.offset = d.at("offset").get<double>();
    s.ramp_length = d.at("ramp_length").get<double>();
    s.plateau = d.at("plateau").get<double>();
    s.start_x = d.at("start_x").get<double>();
    return s;
  }
  if (name == "line") return make_line_scenario(speed, dt());
  throw ConfigError("unknown scenario: " + name);
}

std::vector<Scenario> Config::train_scenarios() const {
  std::vector<Scenario> out;
  for (const auto& name : data_.at("scenario").at("train_mix"))
    out.push_back(scenario_by_name(name.get<std::string>()));
  if (out.empty()) throw ConfigError("scenario.train_mix is empty");
  return out;
}

std::string Config::eval_scenario_name() const {
  return data_.at("scenario").at("eval").get<std::string>();
}

PolicyHyper Config::policy_hyper() const {
  const auto& p = data_.at("policy");
  PolicyHyper h;
  const std::string arch = p.at("arch").get<std::string>();
  if (arch != "transformer" && arch != "mlp")
    throw ConfigError("policy.arch must be transformer or mlp");
  h.arch = arch == "mlp" ? PolicyArch::kMlp : PolicyArch::kTransformer;
  h.d_embed = p.at("d_embed").get<int>();
  h.n_heads = p.at("n_heads").get<int>();
  h.n_layers = p.at("n_layers").get<int>();
  h.d_ffn = p.at("d_ffn").get<int>();
  h.N_max = p.at("N_max").get<int>();
  h.mlp_width = p.at("mlp_width").get<int>();
  h.mlp_horizon = p.at("mlp_horizon").get<int>();
  h.n_state = robot_task() ? RobotState::kDim : VehicleState::kDim;
  h.n_ref = 4;
  h.n_input = 2;
  return h;
}

NormSpec Config::norm_spec() const {
  NormSpec n;
  n.pos_scale = data_.at("policy").at("pos_scale").get<double>();
  n.v_nom = data_.at("policy").at("v_nom").get<double>();
  n.layout = robot_task() ? robot_layout() : vehicle_layout();
  return n;
}

TrainTask Config::train_task() const {
  TrainTask task;
  task.plant = plant();
  task.scenarios = train_scenarios();
  task.robot_task = robot_task();
  task.hyper = policy_hyper();
  task.norm = norm_spec();
  return task;
}

TrainConfig Config::train_config() const {
  const auto& t = data_.at("train");
  TrainConfig c;
  c.iterations = t.at("iterations").get<int>();
  c.episode_length = t.at("episode_length").get<int>();
  c.minibatch = t.at("minibatch").get<std::size_t>();
  c.buffer_capacity = t.at("buffer_capacity").get<std::size_t>();
  c.N_max = data_.at("policy").at("N_max").get<int>();
  c.adam.lr = t.at("lr").get<double>();
  c.adam.beta1 = t.at("beta1").get<double>();
  c.adam.beta2 = t.at("beta2").get<double>();
  c.adam.eps = t.at("eps").get<double>();
  c.seed = seed();
  c.checkpoint_every = t.at("checkpoint_every").get<int>();
  c.threads = t.at("threads").get<int>();
  c.concurrent = t.at("concurrent").get<bool>();
  c.store_initial_state = t.at("store_initial_state").get<bool>();
  const auto& r = t.at("reset");
  c.reset.lateral = r.at("lateral").get<double>();
  c.reset.heading = r.at("heading").get<double>();
  c.reset.speed_dev = r.at("speed_dev").get<double>();
  c.reset.path_span = r.at("path_span").get<long>();
  c.reset.obstacle_min_ahead = r.at("obstacle_min_ahead").get<long>();
  c.reset.obstacle_max_ahead = r.at("obstacle_max_ahead").get<long>();
  if (c.iterations < 0 || c.episode_length < 1 || c.minibatch < 1 ||
      c.adam.lr <= 0.0 || c.N_max < 1)
    throw ConfigError("train: invalid values");
  return c;
}

OracleSettings Config::oracle_settings() const {
  const auto& o = data_.at("oracle");
  OracleSettings s;
  s.tol = o.at("tol").get<double>();
  s.max_iters = o.at("max_iters").get<int>();
  s.restarts = o.at("restarts").get<int>();
  s.lbfgs_memory = o.at("lbfgs_memory").get<int>();
  s.seed = seed();
  return s;
}

EvalSettings Config::eval_settings() const {
  const auto& e = data_.at("eval");
  EvalSettings s;
  s.n_states = e.at("n_states").get<int>();
  s.steps = e.at("steps").get<int>();
  s.control_hz = 1.0 / dt();
  s.divergence_abort = e.at("divergence_abort").get<double>();
  s.max_oracle_failure_rate = e.at("max_oracle_failure_rate").get<double>();
  s.bench_repetitions = e.at("bench_repetitions").get<int>();
  s.threads = e.at("threads").get<int>();
  return s;
}

std::vector<int> Config::closed_loop_horizons() const {
  return data_.at("eval").at("closed_loop_horizons").get<std::vector<int>>();
}

std::vector<int> Config::bench_horizons() const {
  return data_.at("eval").at("bench_horizons").get<std::vector<int>>();
}

}  // namespace transmpc
