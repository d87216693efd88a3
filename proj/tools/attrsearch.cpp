// attrsearch command line: dataset generation, training, indexing, querying,
// evaluation, ablation, explanation and serving.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "attrsearch/ablation.hpp"
#include "attrsearch/service.hpp"

namespace fs = std::filesystem;
using namespace attrsearch;

namespace {

struct DataOpts {
  std::string out = "data";
  std::size_t n = 7500;
  std::size_t n_query = 500;
  std::size_t n_gallery = 2000;
  std::uint64_t seed = 0;
  int jitter = 2;
  double noise = 0.02;
};

struct TrainOpts {
  std::string data = "data";
  std::string variant = "Full";
  std::string out = "model.ckpt";
  std::string report;
  std::uint64_t seed = 0;
  std::size_t epochs1 = 12, epochs2 = 12, epochs3 = 2;
  std::size_t batch = 16;
  std::size_t global_triplets = 0;
  double lr = 0.01;
  double clip = 25.0;
  double keep = 0.5;
  double lambda_c = 1.0, lambda_t = 1.5, lambda_tc = 1.0;
  std::size_t r = 32;
  bool shared_projection = false;
  bool squared_ranking = false;
  bool freeze_boxes = false;

  TrainConfig config() const {
    TrainConfig tc;
    tc.seed = seed;
    tc.stage1_epochs = epochs1;
    tc.stage2_epochs = epochs2;
    tc.stage3_epochs = epochs3;
    tc.batch_size = batch;
    tc.global_triplets_per_epoch = global_triplets;
    tc.sgd.learning_rate = lr;
    tc.sgd.clip_norm = clip;
    tc.sgd.dropout_keep_probability = keep;
    tc.stage2_weights = {lambda_c, lambda_t, lambda_tc, 0.0};
    tc.model.global.r = r;
    tc.model.global.shared_projection = shared_projection;
    tc.model.head.squared_ranking = squared_ranking;
    tc.freeze_boxes = freeze_boxes;
    return tc;
  }
};

struct IndexOpts {
  std::string checkpoint = "model.ckpt";
  std::string data = "data";
  std::string index = "gallery.idx";
};

template <typename T>
std::vector<T> parse_list(const std::string& s) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw ArgumentError("cannot parse list item '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ArgumentError("empty list '" + s + "'");
  return out;
}

void add_train_options(CLI::App* cmd, TrainOpts& t) {
  cmd->add_option("--data", t.data, "dataset directory");
  cmd->add_option("--seed", t.seed, "training seed");
  cmd->add_option("--epochs-stage1", t.epochs1, "stage 1 epochs");
  cmd->add_option("--epochs-stage2", t.epochs2, "stage 2 epochs");
  cmd->add_option("--epochs-stage3", t.epochs3, "stage 3 epochs");
  cmd->add_option("--batch", t.batch, "mini-batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--global-triplets", t.global_triplets, "stage 3 triplets per epoch (0: one per training image)");
  cmd->add_option("--lr", t.lr, "SGD learning rate");
  cmd->add_option("--clip-norm", t.clip, "bound on the global gradient norm per step (0: off)");
  cmd->add_option("--keep", t.keep, "dropout keep probability");
  cmd->add_option("--lambda-c", t.lambda_c, "stage 2 weight of L_C");
  cmd->add_option("--lambda-t", t.lambda_t, "stage 2 weight of L_T");
  cmd->add_option("--lambda-tc", t.lambda_tc, "stage 2 weight of L_TC");
  cmd->add_option("--r", t.r, "global representation length");
  cmd->add_flag("--shared-projection", t.shared_projection, "one projection for every manipulated attribute");
  cmd->add_flag("--squared-ranking", t.squared_ranking, "use d+^2 in the ranking loss");
  cmd->add_flag("--freeze-boxes", t.freeze_boxes, "compute pooling boxes once after stage 1");
}

/// Values from a JSON config become option defaults, so flags given on the
/// command line still win. Keys may use the long option name with '-' or '_',
/// at top level or under the subcommand's name.
void apply_config(CLI::App& app, const std::string& path) {
  const auto cfg = nlohmann::json::parse(read_file(path));
  if (!cfg.is_object()) throw ArgumentError("config file must hold a JSON object");
  auto lookup = [](const nlohmann::json& j, std::string name) -> const nlohmann::json* {
    if (auto it = j.find(name); it != j.end()) return &*it;
    std::replace(name.begin(), name.end(), '-', '_');
    if (auto it = j.find(name); it != j.end()) return &*it;
    return nullptr;
  };
  for (CLI::App* sub : app.get_subcommands([](CLI::App*) { return true; })) {
    const nlohmann::json* section = lookup(cfg, sub->get_name());
    for (CLI::Option* opt : sub->get_options()) {
      const std::string name = opt->get_single_name();
      if (name.empty() || name == "help" || name == "config") continue;
      const nlohmann::json* v = section && section->is_object() ? lookup(*section, name) : nullptr;
      if (!v) v = lookup(cfg, name);
      if (!v) continue;
      std::string text;
      if (v->is_string()) {
        text = v->get<std::string>();
      } else if (v->is_array()) {
        for (const auto& item : *v) text += (text.empty() ? "" : ",") + (item.is_string() ? item.get<std::string>() : item.dump());
      } else {
        text = v->dump();
      }
      opt->default_val(text);
    }
  }
}

std::string find_config(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return {};
}

void progress(int stage, std::size_t epoch, double loss) {
  std::fprintf(stderr, "stage %d epoch %zu loss %.6f\n", stage, epoch + 1, loss);
}

Manipulation parse_set(const AttributeSchema& schema, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ArgumentError("--set expects <attribute>=<value>");
  const std::string attr = spec.substr(0, eq), value = spec.substr(eq + 1);
  const auto a = schema.find_attribute(attr);
  if (!a) throw ArgumentError("unknown attribute '" + attr + "'");
  const auto v = schema.find_value(*a, value);
  if (!v) throw ArgumentError("attribute '" + attr + "' has no value '" + value + "'");
  return {*a, static_cast<int>(*v)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-manipulation image retrieval"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  app.add_option("--config", config_path, "JSON file with option values; command line flags take precedence");

  DataOpts d;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen->add_option("--out", d.out, "output directory");
  gen->add_option("--n", d.n, "number of images")->check(CLI::PositiveNumber);
  gen->add_option("--query", d.n_query, "query split size");
  gen->add_option("--gallery", d.n_gallery, "gallery split size");
  gen->add_option("--seed", d.seed, "generator seed");
  gen->add_option("--jitter", d.jitter, "glyph jitter in pixels");
  gen->add_option("--noise", d.noise, "pixel noise standard deviation");

  TrainOpts t;
  auto* train = app.add_subcommand("train", "train one variant");
  add_train_options(train, t);
  train->add_option("--variant", t.variant, "woRank|Rank|RankL|RankLG|Full|FullFF");
  train->add_option("--out", t.out, "checkpoint path");
  train->add_option("--report", t.report, "training report JSON path");

  IndexOpts ix;
  auto* index = app.add_subcommand("index", "index the gallery split");
  index->add_option("--checkpoint", ix.checkpoint, "checkpoint path");
  index->add_option("--data", ix.data, "dataset directory");
  index->add_option("--out", ix.index, "index path");

  IndexOpts qx;
  std::string image_id, set_spec;
  std::size_t k = 10;
  auto* query = app.add_subcommand("query", "manipulation query for one image");
  query->add_option("--checkpoint", qx.checkpoint, "checkpoint path");
  query->add_option("--index", qx.index, "index path");
  query->add_option("--data", qx.data, "dataset directory");
  query->add_option("--image", image_id, "query image id")->required();
  query->add_option("--set", set_spec, "manipulation <attribute>=<value>")->required();
  query->add_option("-k", k, "number of results");

  IndexOpts ex;
  std::string ks_text = "10,20,30", csv_path, json_path;
  auto* eval = app.add_subcommand("eval", "Top-K accuracy on the query split");
  eval->add_option("--checkpoint", ex.checkpoint, "checkpoint path");
  eval->add_option("--index", ex.index, "index path");
  eval->add_option("--data", ex.data, "dataset directory");
  eval->add_option("-k", ks_text, "comma separated K values");
  eval->add_option("--csv", csv_path, "CSV output path");
  eval->add_option("--json", json_path, "JSON summary path");

  TrainOpts at;
  std::string variants_text = "woRank,Rank,RankL,RankLG,Full,FullFF", seeds_text = "0,1,2", ablate_ks = "10,20,30",
              ablate_out = "ablation";
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the variant ladder over several seeds");
  add_train_options(ablate, at);
  ablate->add_option("--variants", variants_text, "comma separated variants");
  ablate->add_option("--seeds", seeds_text, "comma separated seeds");
  ablate->add_option("-k", ablate_ks, "comma separated K values");
  ablate->add_option("--out", ablate_out, "output directory");

  std::string explain_ckpt = "model.ckpt", explain_data = "data", explain_image, explain_out = "explain";
  auto* explain = app.add_subcommand("explain", "write activation-map PNGs and boxes for one image");
  explain->add_option("--checkpoint", explain_ckpt, "checkpoint path");
  explain->add_option("--data", explain_data, "dataset directory");
  explain->add_option("--image", explain_image, "image id")->required();
  explain->add_option("--out", explain_out, "output directory");

  IndexOpts sx;
  int port = 8080;
  std::string host = "127.0.0.1", static_dir;
  std::size_t thumb = 64;
  auto* serve = app.add_subcommand("serve", "HTTP service over a checkpoint and index");
  serve->add_option("--checkpoint", sx.checkpoint, "checkpoint path");
  serve->add_option("--index", sx.index, "index path");
  serve->add_option("--data", sx.data, "dataset directory");
  serve->add_option("--port", port, "port");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--static", static_dir, "directory of static files served at /");
  serve->add_option("--thumbnail-size", thumb, "thumbnail edge in pixels");

  try {
    if (const std::string cfg = find_config(argc, argv); !cfg.empty()) apply_config(app, cfg);
  } catch (const std::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  }
  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto schema = AttributeSchema::default_schema();
      SynthConfig sc;
      sc.jitter = d.jitter;
      sc.noise_sigma = d.noise;
      auto images = generate_dataset(schema, d.n, d.seed, sc);
      auto sp = split(images, d.n_query, d.n_gallery, d.seed);
      Dataset(schema, std::move(images), std::move(sp)).save(d.out);
      std::cout << "wrote " << d.n << " images to " << d.out << "\n";
    } else if (*train) {
      const Dataset data = Dataset::load(t.data);
      TrainConfig tc = t.config();
      tc.on_epoch = progress;
      Trainer trainer(data, tc);
      const TrainResult res = trainer.train(parse_variant(t.variant));
      res.model.save(t.out);
      if (!t.report.empty()) write_file(t.report, res.report.to_json().dump(2) + "\n");
      std::cout << "wrote " << t.out << " (version " << res.model.version() << ")\n";
    } else if (*index) {
      const Model model = Model::load(ix.checkpoint);
      const Dataset data = Dataset::load(ix.data);
      const GalleryIndex idx = index_gallery(model, data.subset(data.split().gallery));
      idx.save(ix.index);
      std::cout << "indexed " << idx.size() << " gallery images into " << ix.index << "\n";
    } else if (*query) {
      const Model model = Model::load(qx.checkpoint);
      const GalleryIndex idx = GalleryIndex::load(qx.index);
      const Dataset data = Dataset::load(qx.data);
      if (idx.model_version != model.version()) throw LoadError("index and checkpoint versions differ");
      const LabeledImage& img = data.get(image_id);
      const QueryResult r = attrsearch::query(idx, model, img, parse_set(model.schema, set_spec), k);
      std::cout << "rank,id,distance,hit\n";
      for (std::size_t j = 0; j < r.ids.size(); ++j)
        std::cout << j + 1 << ',' << r.ids[j] << ',' << r.distances[j] << ',' << (r.hits[j] ? 1 : 0) << '\n';
    } else if (*eval) {
      const Model model = Model::load(ex.checkpoint);
      const GalleryIndex idx = GalleryIndex::load(ex.index);
      const Dataset data = Dataset::load(ex.data);
      if (idx.model_version != model.version()) throw LoadError("index and checkpoint versions differ");
      const EvalResult res = evaluate(idx, model, data.subset(data.split().query), parse_list<std::size_t>(ks_text));
      std::cout << res.csv();
      if (!csv_path.empty()) write_file(csv_path, res.csv());
      if (!json_path.empty()) write_file(json_path, res.summary().dump(2) + "\n");
    } else if (*ablate) {
      const Dataset data = Dataset::load(at.data);
      AblationConfig ac;
      ac.variants.clear();
      for (const auto& v : parse_list<std::string>(variants_text)) ac.variants.push_back(parse_variant(v));
      ac.seeds = parse_list<std::uint64_t>(seeds_text);
      ac.ks = parse_list<std::size_t>(ablate_ks);
      ac.train = at.config();
      ac.train.on_epoch = progress;
      ac.checkpoint_dir = fs::path(ablate_out) / "checkpoints";
      ac.log = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
      const AblationTable table = ablation_run(data, ac);
      fs::create_directories(ablate_out);
      write_file(fs::path(ablate_out) / "ablation.csv", table.csv());
      for (std::size_t kk : table.ks) std::cout << "K=" << kk << "\n" << table.text(kk) << "\n";
    } else if (*explain) {
      const Model model = Model::load(explain_ckpt);
      const Dataset data = Dataset::load(explain_data);
      const LabeledImage& img = data.get(explain_image);
      const auto fm = model.features(img);
      fs::create_directories(explain_out);
      auto records = nlohmann::ordered_json::array();
      for (std::size_t a = 0; a < model.schema.attribute_count(); ++a) {
        const auto aam = model.aam(fm, a);
        const RoiBox box = threshold_bbox(aam);
        const std::string name = model.schema.attribute(a).name;
        write_file(fs::path(explain_out) / (explain_image + "_" + name + ".png"),
                   encode_png(render_heatmap(aam.heatmap, img.image.height, img.image.width)));
        records.push_back({{"attribute", name},
                           {"class", model.schema.attribute(a).values.at(aam.cls)},
                           {"box", {{"y1", box.y1}, {"x1", box.x1}, {"y2", box.y2}, {"x2", box.x2}}}});
      }
      write_file(fs::path(explain_out) / (explain_image + ".json"), records.dump(2) + "\n");
      std::cout << records.dump(2) << "\n";
    } else if (*serve) {
      Service service(ServiceState::open(sx.checkpoint, sx.index, sx.data), thumb);
      httplib::Server server;
      service.mount(server, static_dir);
      std::cerr << "listening on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
