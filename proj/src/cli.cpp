#include "rat/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "rat/error.hpp"
#include "rat/metrics.hpp"
#include "rat/model.hpp"
#include "rat/retrieval.hpp"
#include "rat/synthetic.hpp"

namespace rat {

namespace {

namespace fs = std::filesystem;

const std::vector<std::pair<std::string, std::string>> kSubcommands{
    {"build-index", "Build the retrieval index over the training slice and write it as a RATI file"},
    {"retrieve", "Retrieve top-k training records for each row of a query CSV (JSON lines on stdout)"},
    {"train", "Train a model; writes model.ratm, train_log.jsonl and config.toml to --out"},
    {"evaluate", "Evaluate a checkpoint on the test slice and print the report as JSON"},
    {"ablate", "Train JM, CE, PA and CASCADE with one config and write ablation.csv to --out"},
    {"synthesize", "Write the neighbor-majority synthetic task to <out>/synthetic.csv"},
};

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> items;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) {
            items.push_back(item);
        }
    }
    return items;
}

std::string join_list(const std::vector<std::string>& items) {
    std::string text;
    for (const auto& item : items) {
        text += (text.empty() ? "" : ",") + item;
    }
    return text;
}

// Flag values bound to CLI11; converted into a CliConfig after parsing.
struct Bindings {
    CliConfig cfg;
    std::string features;
    std::string variant = "cascade";
    std::string activation = "gelu";
    std::string config_path;

    CliConfig finish() const {
        CliConfig c = cfg;
        c.features = split_list(features);
        c.train.model.variant = parse_variant(variant);
        c.train.model.activation = parse_activation(activation);
        if (c.delimiter.size() != 1) {
            throw UsageError("--delimiter must be a single character");
        }
        return c;
    }
};

void bind_all(CLI::App& app, Bindings& b) {
    auto& c = b.cfg;
    auto& t = c.train;
    auto& m = t.model;
    app.add_option("--config", b.config_path, "TOML file of flag defaults (keys are flag names without dashes)");
    app.add_option("--data", c.data, "Dataset CSV with a header row");
    app.add_option("--label-column", c.label_column, "Label column (values 0 or 1)")->capture_default_str();
    app.add_option("--timestamp-column", c.timestamp_column, "Integer timestamp column; empty uses row order");
    app.add_option("--features", b.features, "Comma-separated feature columns; empty uses all other columns");
    app.add_option("--delimiter", c.delimiter, "CSV delimiter")->capture_default_str();
    app.add_option("--train-ratio", c.ratios.train, "Chronological train fraction")->capture_default_str();
    app.add_option("--valid-ratio", c.ratios.valid, "Chronological validation fraction")->capture_default_str();
    app.add_option("--test-ratio", c.ratios.test, "Chronological test fraction")->capture_default_str();
    app.add_option("--user-field", c.user_field, "User column for tail segments; empty uses the first feature");
    app.add_option("--out", c.out, "Output directory")->capture_default_str();
    app.add_option("--index", c.index, "RATI index path; empty uses <out>/index.rati");
    app.add_option("--queries", c.queries, "Query CSV for retrieve");
    app.add_option("--checkpoint", c.checkpoint, "RATM checkpoint path; empty uses <out>/model.ratm");
    app.add_option("--segments", c.segments, "Evaluation segments, e.g. tail10,tail20");
    app.add_option("--workers", c.workers, "Retrieval threads, 0 = hardware count")->capture_default_str();
    app.add_option("--num-keys", c.num_keys, "Keys in the synthetic task")->capture_default_str();
    app.add_option("--seed", t.seed, "Random seed")->capture_default_str();
    app.add_option("--k", m.k, "Retrieved neighbors per record")->capture_default_str();
    app.add_option("--variant", b.variant, "Block design: cascade, jm, ce or pa")->capture_default_str();
    app.add_option("--embed-dim", m.embed_dim, "Embedding width D")->capture_default_str();
    app.add_option("--num-blocks", m.num_blocks, "Number of blocks L")->capture_default_str();
    app.add_option("--num-heads", m.num_heads, "Attention heads")->capture_default_str();
    app.add_option("--mlp-ratio", m.mlp_ratio, "MLP hidden width as a multiple of D")->capture_default_str();
    app.add_option("--activation", b.activation, "MLP activation: gelu or relu")->capture_default_str();
    app.add_option("--cross-attention", m.cross_attention, "false disables cross-sample attention")
        ->capture_default_str();
    app.add_option("--learning-rate", t.learning_rate, "Adam step size")->capture_default_str();
    app.add_option("--adam-beta1", t.adam_beta1, "Adam beta1")->capture_default_str();
    app.add_option("--adam-beta2", t.adam_beta2, "Adam beta2")->capture_default_str();
    app.add_option("--adam-eps", t.adam_eps, "Adam epsilon")->capture_default_str();
    app.add_option("--batch-size", t.batch_size, "Minibatch size")->capture_default_str();
    app.add_option("--max-epochs", t.max_epochs, "Epoch limit")->capture_default_str();
    app.add_option("--early-stop-patience", t.early_stop_patience, "Epochs without validation AUC gain")
        ->capture_default_str();
    app.add_option("--logloss-clip-eps", t.logloss_clip_eps, "Probability clip for logloss")->capture_default_str();
    app.add_option("--record-wall-time", t.record_wall_time, "true logs elapsed wall_ms; the default false logs 0 so reruns are byte-identical")
        ->capture_default_str();
}

struct CommandLine {
    CLI::App app{"Retrieval-augmented click-through-rate prediction", "rat"};
    std::vector<std::pair<CLI::App*, std::unique_ptr<Bindings>>> subs;

    CommandLine() {
        app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        app.require_subcommand(1);
        for (const auto& [name, description] : kSubcommands) {
            auto* sub = app.add_subcommand(name, description);
            auto bindings = std::make_unique<Bindings>();
            bind_all(*sub, *bindings);
            subs.emplace_back(sub, std::move(bindings));
        }
    }

    std::pair<CLI::App*, Bindings*> selected() {
        for (auto& [sub, b] : subs) {
            if (sub->parsed()) {
                return {sub, b.get()};
            }
        }
        return {nullptr, nullptr};
    }
};

std::string config_file_arg(std::span<const std::string> args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        }
    }
    return path;
}

// Config keys become "--key=value" tokens placed before the user's own flags, so the
// command line wins under the take-last policy.
std::vector<std::string> config_tokens(const std::string& path) {
    if (!fs::exists(path)) {
        throw DataError("config file '" + path + "' does not exist");
    }
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_file(path);
    } catch (const CLI::Error& e) {
        throw DataError("config file '" + path + "': " + e.what());
    }
    std::vector<std::string> tokens;
    for (const auto& item : items) {
        if (!item.parents.empty() || item.name == "++" || item.name == "--") {
            if (item.name == "++" || item.name == "--") {
                continue;  // section markers
            }
            throw UsageError("config file '" + path + "': sections are not supported (key '" + item.fullname() +
                             "')");
        }
        if (item.inputs.size() != 1) {
            throw UsageError("config file '" + path + "': key '" + item.name + "' needs exactly one value");
        }
        tokens.push_back("--" + item.name + "=" + item.inputs.front());
    }
    return tokens;
}

void parse_into(CommandLine& cl, std::span<const std::string> args) {
    std::vector<std::string> full(args.begin(), args.end());
    const auto path = config_file_arg(args);
    if (!path.empty() && !full.empty()) {
        const auto tokens = config_tokens(path);
        full.insert(full.begin() + 1, tokens.begin(), tokens.end());
    }
    // CLI11 consumes arguments from the back.
    std::vector<std::string> reversed(full.rbegin(), full.rend());
    cl.app.parse(reversed);
}

std::string toml_string(const std::string& s) { return nlohmann::json(s).dump(); }

std::string toml_double(double v) {
    std::ostringstream out;
    out << std::setprecision(17) << v;
    return out.str();
}

SchemaSpec schema_of(const CliConfig& c) {
    if (c.data.empty()) {
        throw UsageError("--data is required");
    }
    if (!fs::exists(c.data)) {
        throw DataError("dataset file '" + c.data + "' does not exist");
    }
    SchemaSpec spec;
    spec.label_column = c.label_column;
    if (!c.timestamp_column.empty()) {
        spec.timestamp_column = c.timestamp_column;
    }
    spec.delimiter = c.delimiter.front();
    spec.ratios = c.ratios;
    spec.feature_columns = c.features;
    if (spec.feature_columns.empty()) {
        std::ifstream in(c.data, std::ios::binary);
        std::string header;
        if (!std::getline(in, header)) {
            throw DataError(c.data + ": empty file");
        }
        if (!header.empty() && header.back() == '\r') {
            header.pop_back();
        }
        if (header.rfind("\xEF\xBB\xBF", 0) == 0) {
            header.erase(0, 3);
        }
        for (const auto& col : split_csv_line(header, spec.delimiter)) {
            if (col != spec.label_column && col != c.timestamp_column) {
                spec.feature_columns.push_back(col);
            }
        }
    }
    return spec;
}

Dataset load_data(const CliConfig& c) { return load_csv(c.data, schema_of(c)); }

fs::path index_path(const CliConfig& c) { return c.index.empty() ? fs::path(c.out) / "index.rati" : fs::path(c.index); }

fs::path checkpoint_path(const CliConfig& c) {
    return c.checkpoint.empty() ? fs::path(c.out) / "model.ratm" : fs::path(c.checkpoint);
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw std::runtime_error("cannot create output directory '" + dir + "': " + ec.message());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) {
        throw std::runtime_error("cannot write '" + path.string() + "'");
    }
}

RetrievalIndex build_train_index(const Dataset& ds) { return RetrievalIndex::build(ds.train()); }

int cmd_build_index(const CliConfig& c, std::ostream& out) {
    const auto ds = load_data(c);
    const auto start = std::chrono::steady_clock::now();
    const auto index = build_train_index(ds);
    const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    const auto path = index_path(c);
    if (path.has_parent_path()) {
        ensure_dir(path.parent_path().string());
    }
    index.save(path);
    out << nlohmann::json{{"index", path.string()},
                          {"pool_size", index.pool_size()},
                          {"distinct_terms", index.distinct_terms()},
                          {"build_ms", ms},
                          {"seed", c.train.seed}}
               .dump()
        << '\n';
    return 0;
}

int cmd_retrieve(const CliConfig& c, std::ostream& out) {
    if (c.queries.empty()) {
        throw UsageError("--queries is required");
    }
    const auto ds = load_data(c);
    const auto index = RetrievalIndex::load(index_path(c));
    if (index.num_fields() != ds.num_fields() || index.pool_size() != ds.split.train_end) {
        throw DataError("index '" + index_path(c).string() + "' does not match the dataset schema");
    }
    std::ifstream in(c.queries, std::ios::binary);
    if (!in) {
        throw DataError("cannot open query file '" + c.queries + "'");
    }
    const char delim = c.delimiter.front();
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(c.queries + ": empty file");
    }
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    const auto header = split_csv_line(line, delim);
    std::vector<std::size_t> columns;
    for (const auto& field : ds.schema) {
        const auto it = std::find(header.begin(), header.end(), field.name());
        if (it == header.end()) {
            throw DataError(c.queries + ": missing feature column '" + field.name() + "'");
        }
        columns.push_back(static_cast<std::size_t>(it - header.begin()));
    }
    std::vector<Record> queries;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto cells = split_csv_line(line, delim);
        if (cells.size() != header.size()) {
            throw DataError(c.queries + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
        }
        std::vector<std::string> values;
        for (auto col : columns) {
            values.push_back(cells[col]);
        }
        Record r;
        r.field_ids = ds.encode(values);
        r.index = queries.size();
        queries.push_back(std::move(r));
    }
    const auto results = index.retrieve_batch(queries, c.train.model.k, Eligibility::WholePool, c.workers);
    for (std::size_t q = 0; q < results.size(); ++q) {
        const auto& r = results[q];
        nlohmann::json neighbors = nlohmann::json::array();
        nlohmann::json scores = nlohmann::json::array();
        for (std::size_t i = 0; i < r.mask.size(); ++i) {
            neighbors.push_back(r.mask[i] ? nlohmann::json(r.neighbor_indices[i]) : nlohmann::json(nullptr));
            scores.push_back(r.mask[i] ? nlohmann::json(r.scores[i]) : nlohmann::json(nullptr));
        }
        out << nlohmann::json{{"query", q}, {"neighbors", neighbors}, {"scores", scores}, {"mask", r.mask}}.dump()
            << '\n';
    }
    return 0;
}

nlohmann::json run_config_json(const CliConfig& c) {
    return nlohmann::json{{"model", c.train.model}, {"train", c.train}, {"seed", c.train.seed}};
}

int cmd_train(const CliConfig& c, std::ostream& out) {
    const auto ds = load_data(c);
    const auto index = build_train_index(ds);
    ensure_dir(c.out);
    const fs::path dir(c.out);
    std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
    if (!log) {
        throw std::runtime_error("cannot write '" + (dir / "train_log.jsonl").string() + "'");
    }
    auto result = train(ds, index, c.train, [&](const nlohmann::json& rec) { log << rec.dump() << '\n'; });
    log.close();
    save_checkpoint(result.model, run_config_json(c), checkpoint_path(c));
    write_text(dir / "config.toml", config_to_toml(c));
    out << result.log.back().dump() << '\n';
    return 0;
}

int cmd_evaluate(const CliConfig& c, std::ostream& out) {
    const auto ds = load_data(c);
    auto ckpt = load_checkpoint(checkpoint_path(c));
    TrainConfig tcfg = c.train;
    if (ckpt.config.contains("train")) {
        tcfg = ckpt.config.at("train").get<TrainConfig>();
    }
    const auto& vocab = ckpt.model.vocab_sizes();
    if (vocab.size() != ds.num_fields()) {
        throw DataError("checkpoint expects " + std::to_string(vocab.size()) + " fields, dataset has " +
                        std::to_string(ds.num_fields()));
    }
    for (std::size_t f = 0; f < vocab.size(); ++f) {
        if (vocab[f] != ds.schema[f].vocab_size()) {
            throw DataError("checkpoint vocabulary of field '" + ds.schema[f].name() + "' does not match the dataset");
        }
    }
    const auto index = build_train_index(ds);
    std::vector<Segment> segments;
    if (!c.segments.empty()) {
        const auto percents = parse_tail_segments(c.segments);
        std::size_t user = 0;
        if (!c.user_field.empty()) {
            const auto it = std::find_if(ds.schema.begin(), ds.schema.end(),
                                         [&](const FieldSchema& f) { return f.name() == c.user_field; });
            if (it == ds.schema.end()) {
                throw UsageError("user field '" + c.user_field + "' is not a feature column");
            }
            user = static_cast<std::size_t>(it - ds.schema.begin());
        }
        segments = tail_user_segments(ds, ds.test(), user, percents);
    }
    const auto report = evaluate(ckpt.model, ds, ds.test(), index, tcfg, segments);
    auto j = to_json(report);
    j["seed"] = tcfg.seed;
    j["variant"] = std::string(to_string(ckpt.model.config().variant));
    out << j.dump() << '\n';
    return 0;
}

int cmd_ablate(const CliConfig& c, std::ostream& out) {
    const auto ds = load_data(c);
    const auto index = build_train_index(ds);
    ensure_dir(c.out);
    const auto rows = ablate(ds, index, c.train);
    const auto csv = ablation_csv(rows);
    write_text(fs::path(c.out) / "ablation.csv", csv);
    out << "seed=" << c.train.seed << '\n' << csv;
    return 0;
}

int cmd_synthesize(const CliConfig& c, std::ostream& out) {
    SyntheticConfig sc;
    sc.num_keys = c.num_keys;
    sc.seed = c.train.seed;
    ensure_dir(c.out);
    const auto path = fs::path(c.out) / "synthetic.csv";
    write_text(path, synthetic_csv(sc));
    out << nlohmann::json{{"data", path.string()}, {"label_column", "label"}, {"timestamp_column", "ts"},
                          {"seed", c.train.seed}}
               .dump()
        << '\n';
    return 0;
}

}  // namespace

ParsedCommand parse_command_line(std::span<const std::string> args) {
    CommandLine cl;
    try {
        parse_into(cl, args);
    } catch (const CLI::ParseError& e) {
        throw UsageError(e.what());
    }
    auto [sub, bindings] = cl.selected();
    if (sub == nullptr) {
        throw UsageError("no subcommand given");
    }
    return ParsedCommand{sub->get_name(), bindings->finish()};
}

std::string config_to_toml(const CliConfig& c) {
    const auto& t = c.train;
    const auto& m = t.model;
    std::ostringstream out;
    auto str = [&](const char* key, const std::string& v) {
        if (!v.empty()) {
            out << key << " = " << toml_string(v) << '\n';
        }
    };
    auto num = [&](const char* key, auto v) { out << key << " = " << v << '\n'; };
    auto dbl = [&](const char* key, double v) { out << key << " = " << toml_double(v) << '\n'; };
    auto boolean = [&](const char* key, bool v) { out << key << " = " << (v ? "true" : "false") << '\n'; };
    str("data", c.data);
    str("label-column", c.label_column);
    str("timestamp-column", c.timestamp_column);
    str("features", join_list(c.features));
    str("delimiter", c.delimiter);
    dbl("train-ratio", c.ratios.train);
    dbl("valid-ratio", c.ratios.valid);
    dbl("test-ratio", c.ratios.test);
    str("user-field", c.user_field);
    str("out", c.out);
    str("index", c.index);
    str("queries", c.queries);
    str("checkpoint", c.checkpoint);
    str("segments", c.segments);
    num("workers", c.workers);
    num("num-keys", c.num_keys);
    num("seed", t.seed);
    num("k", m.k);
    str("variant", std::string(to_string(m.variant)));
    num("embed-dim", m.embed_dim);
    num("num-blocks", m.num_blocks);
    num("num-heads", m.num_heads);
    num("mlp-ratio", m.mlp_ratio);
    str("activation", std::string(to_string(m.activation)));
    boolean("cross-attention", m.cross_attention);
    dbl("learning-rate", t.learning_rate);
    dbl("adam-beta1", t.adam_beta1);
    dbl("adam-beta2", t.adam_beta2);
    dbl("adam-eps", t.adam_eps);
    num("batch-size", t.batch_size);
    num("max-epochs", t.max_epochs);
    num("early-stop-patience", t.early_stop_patience);
    dbl("logloss-clip-eps", t.logloss_clip_eps);
    boolean("record-wall-time", t.record_wall_time);
    return out.str();
}

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
    try {
        CommandLine cl;
        try {
            parse_into(cl, args);
        } catch (const CLI::CallForHelp&) {
            auto [sub, bindings] = cl.selected();
            out << (sub != nullptr ? sub->help() : cl.app.help());
            return 0;
        } catch (const CLI::ParseError& e) {
            err << "error: " << e.what() << "\nRun with --help for more information.\n";
            return 1;
        }
        auto [sub, bindings] = cl.selected();
        const auto cfg = bindings->finish();
        cfg.train.validate();
        const auto& name = sub->get_name();
        if (name == "build-index") {
            return cmd_build_index(cfg, out);
        }
        if (name == "retrieve") {
            return cmd_retrieve(cfg, out);
        }
        if (name == "train") {
            return cmd_train(cfg, out);
        }
        if (name == "evaluate") {
            return cmd_evaluate(cfg, out);
        }
        if (name == "ablate") {
            return cmd_ablate(cfg, out);
        }
        return cmd_synthesize(cfg, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "failure: " << e.what() << '\n';
        return 3;
    }
}

}  // namespace rat
