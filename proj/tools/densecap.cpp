// Copyright 2026 The densecap Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// densecap command-line tool. Flags override the matching keys of the
// --config file; the resolved config is written into every output directory.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error,
// 3 numeric failure.

#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#if __has_include(<CLI/CLI.hpp>)
#include <CLI/CLI.hpp>
#else
#include <CLI11.hpp>
#endif

#include "densecap/commands.hpp"

namespace {

using densecap::RunConfig;

class Overrides {
 public:
  template <typename V, typename Field>
  void add(CLI::App* app, const std::string& flag, const std::string& help, Field field) {
    auto value = std::make_shared<std::optional<V>>();
    RunConfig defaults;
    std::ostringstream shown;
    shown << field(defaults);
    auto* opt = app->add_option(flag, *value, help);
    if (!shown.str().empty()) opt->default_str(shown.str());
    apply_.push_back([value, field](RunConfig& c) {
      if (*value) field(c) = **value;
    });
  }

  void apply(RunConfig& c) const {
    for (const auto& f : apply_) f(c);
  }

 private:
  std::vector<std::function<void(RunConfig&)>> apply_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense captioning: joint region localization and description on synthetic scenes."};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  bool print_config = false;
  Overrides ov;
  app.add_option("--config", config_path, "JSON run configuration; unknown keys are rejected");
  app.add_flag("--print-config", print_config, "print the resolved configuration and exit");
  ov.add<std::uint64_t>(&app, "--seed", "random seed", [](RunConfig& c) -> auto& { return c.seed; });
  ov.add<std::string>(&app, "--precision", "scalar type: float or double",
                      [](RunConfig& c) -> auto& { return c.precision; });

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  ov.add<std::string>(gen, "--out", "dataset directory", [](RunConfig& c) -> auto& { return c.data.root; });
  ov.add<std::size_t>(gen, "--num-train", "training images",
                      [](RunConfig& c) -> auto& { return c.data.dataset.num_train; });
  ov.add<std::size_t>(gen, "--num-val", "validation images",
                      [](RunConfig& c) -> auto& { return c.data.dataset.num_val; });
  ov.add<std::size_t>(gen, "--num-test", "test images",
                      [](RunConfig& c) -> auto& { return c.data.dataset.num_test; });
  ov.add<int>(gen, "--image-size", "image width and height",
              [](RunConfig& c) -> auto& { return c.data.dataset.scene.width; });

  auto* train = app.add_subcommand("train", "train a model on a dataset's train split");
  ov.add<std::string>(train, "--data", "dataset directory", [](RunConfig& c) -> auto& { return c.train.data; });
  ov.add<std::string>(train, "--out", "output directory", [](RunConfig& c) -> auto& { return c.train.out; });
  ov.add<std::string>(train, "--resume", "checkpoint to continue from",
                      [](RunConfig& c) -> auto& { return c.train.resume; });
  ov.add<std::size_t>(train, "--iterations", "total iterations (including resumed ones)",
                      [](RunConfig& c) -> auto& { return c.train.train.iterations; });
  ov.add<std::size_t>(train, "--checkpoint-every", "checkpoint interval in iterations (0 = final only)",
                      [](RunConfig& c) -> auto& { return c.train.train.checkpoint_every; });
  ov.add<double>(train, "--caption-weight", "caption loss weight",
                 [](RunConfig& c) -> auto& { return c.train.train.weights.caption; });
  ov.add<bool>(train, "--use-gt-boxes", "caption ground-truth boxes instead of proposals",
               [](RunConfig& c) -> auto& { return c.train.train.use_gt_boxes; });

  auto* describe = app.add_subcommand("describe", "detect and caption regions");
  ov.add<std::string>(describe, "--checkpoint", "model checkpoint",
                      [](RunConfig& c) -> auto& { return c.describe.checkpoint; });
  ov.add<std::string>(describe, "--image", "a single PPM image",
                      [](RunConfig& c) -> auto& { return c.describe.image; });
  ov.add<std::string>(describe, "--data", "dataset directory (instead of --image)",
                      [](RunConfig& c) -> auto& { return c.describe.data; });
  ov.add<std::string>(describe, "--split", "dataset split", [](RunConfig& c) -> auto& { return c.describe.split; });
  ov.add<std::string>(describe, "--out", "output directory", [](RunConfig& c) -> auto& { return c.describe.out; });
  ov.add<std::size_t>(describe, "--max-regions", "regions kept per image",
                      [](RunConfig& c) -> auto& { return c.describe.inference.max_regions; });
  ov.add<double>(describe, "--nms", "final non-maximum suppression IoU",
                 [](RunConfig& c) -> auto& { return c.describe.inference.final_nms; });

  auto* evaluate = app.add_subcommand("evaluate", "dense-captioning AP of predictions against ground truth");
  ov.add<std::string>(evaluate, "--predictions", "predictions JSONL",
                      [](RunConfig& c) -> auto& { return c.evaluate.predictions; });
  ov.add<std::string>(evaluate, "--ground-truth", "ground-truth JSONL",
                      [](RunConfig& c) -> auto& { return c.evaluate.ground_truth; });
  ov.add<std::string>(evaluate, "--split", "evaluate only this ground-truth split",
                      [](RunConfig& c) -> auto& { return c.evaluate.split; });
  ov.add<std::string>(evaluate, "--out", "output directory", [](RunConfig& c) -> auto& { return c.evaluate.out; });

  auto* retrieve = app.add_subcommand("retrieve", "caption-based image retrieval");
  ov.add<std::string>(retrieve, "--checkpoint", "model checkpoint",
                      [](RunConfig& c) -> auto& { return c.retrieve.checkpoint; });
  ov.add<std::string>(retrieve, "--data", "dataset directory", [](RunConfig& c) -> auto& { return c.retrieve.data; });
  ov.add<std::string>(retrieve, "--split", "dataset split", [](RunConfig& c) -> auto& { return c.retrieve.split; });
  ov.add<std::string>(retrieve, "--out", "output directory", [](RunConfig& c) -> auto& { return c.retrieve.out; });
  ov.add<std::size_t>(retrieve, "--queries", "number of queries",
                      [](RunConfig& c) -> auto& { return c.retrieve.queries; });
  ov.add<std::size_t>(retrieve, "--captions-per-query", "captions per query",
                      [](RunConfig& c) -> auto& { return c.retrieve.captions_per_query; });
  ov.add<std::size_t>(retrieve, "--pool", "images in the pool", [](RunConfig& c) -> auto& { return c.retrieve.pool; });

  auto* detect = app.add_subcommand("detect", "open-world detection of a free-text query");
  ov.add<std::string>(detect, "--checkpoint", "model checkpoint",
                      [](RunConfig& c) -> auto& { return c.detect.checkpoint; });
  ov.add<std::string>(detect, "--query", "query text", [](RunConfig& c) -> auto& { return c.detect.query; });
  ov.add<std::string>(detect, "--data", "dataset directory", [](RunConfig& c) -> auto& { return c.detect.data; });
  ov.add<std::string>(detect, "--split", "dataset split", [](RunConfig& c) -> auto& { return c.detect.split; });
  ov.add<std::string>(detect, "--out", "output directory", [](RunConfig& c) -> auto& { return c.detect.out; });
  ov.add<std::size_t>(detect, "--top-n", "detections returned", [](RunConfig& c) -> auto& { return c.detect.top_n; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : densecap::load_run_config(config_path);
    ov.apply(cfg);
    // An image size flag sets both extents.
    if (gen->parsed() && gen->count("--image-size")) cfg.data.dataset.scene.height = cfg.data.dataset.scene.width;
    cfg.validate();
    if (print_config) {
      std::cout << densecap::run_config_to_json(cfg).dump(2) << "\n";
      return 0;
    }
    if (gen->parsed()) densecap::cmd_gen_data(cfg, std::cout);
    else if (train->parsed()) densecap::cmd_train(cfg, std::cout);
    else if (describe->parsed()) densecap::cmd_describe(cfg, std::cout);
    else if (evaluate->parsed()) densecap::cmd_evaluate(cfg, std::cout);
    else if (retrieve->parsed()) densecap::cmd_retrieve(cfg, std::cout);
    else if (detect->parsed()) densecap::cmd_detect(cfg, std::cout);
    return 0;
  } catch (const densecap::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const densecap::ContractError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 1;
  } catch (const densecap::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
}
