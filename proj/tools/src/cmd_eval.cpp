#include <chrono>
#include <iostream>
#include <sstream>

#include "cli_common.hpp"
#include "pseg/checkpoint.hpp"
#include "pseg/inference.hpp"
#include "pseg/io.hpp"

namespace psegcli {

namespace fs = std::filesystem;
using nlohmann::json;

int run_eval(const CommonArgs& args, bool wrong_task_id) {
    const auto t0 = std::chrono::steady_clock::now();
    pseg::ConfigFile cf = pseg::ConfigFile::parse_file(args.config);
    const std::string ckpt = cf.get_str("eval", "checkpoint");
    const std::string data = cf.get_str("eval", "data");
    cf.finish();

    auto loaded = pseg::load_checkpoint<float>(ckpt);
    DataRoot root = load_data_root(data);
    pseg::EvalOptions opts;
    opts.wrong_task_id = wrong_task_id;
    pseg::MetricReport report = pseg::evaluate_datasets(*loaded.model, dataset_ptrs(root), opts);

    fs::create_directories(args.out);
    pseg::write_text_file(fs::path(args.out) / "metrics.csv", report.to_csv());

    std::ostringstream per;
    per << "dataset,dim,class,dice\n";
    std::ostringstream wd;
    wd << "dataset,mean_dice,wdice\n";
    per.precision(10);
    wd.precision(10);
    for (const auto& d : report.datasets) {
        for (size_t c = 0; c < d.per_class_dice.size(); ++c)
            per << d.name << "," << pseg::to_string(d.dim) << "," << (c + 1) << ","
                << d.per_class_dice[c] << "\n";
        wd << d.name << "," << d.mean_dice << ",";
        if (d.wdice) wd << *d.wdice;
        wd << "\n";
    }
    pseg::write_text_file(fs::path(args.out) / "per_class.csv", per.str());
    pseg::write_text_file(fs::path(args.out) / "per_dataset.csv", wd.str());

    json log{{"wrong_task_id", wrong_task_id}, {"mean_overall", report.mean_overall}};
    if (report.mean3d) log["mean_3d"] = *report.mean3d; else log["mean_3d_absent"] = true;
    if (report.mean2d) log["mean_2d"] = *report.mean2d; else log["mean_2d_absent"] = true;
    write_run_log(args.out, log);

    pseg::RunManifest m;
    m.command = "eval";
    m.config_path = args.config;
    m.seed = 0;
    m.inputs_hash = inputs_hash(cf, wrong_task_id ? 1 : 0,
                                {fs::path(ckpt) / "manifest.json", fs::path(data) / "registry.txt"});
    m.outputs = {"metrics.csv", "per_class.csv", "per_dataset.csv", "run_log.json"};
    finish_run(args.out, m,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    std::cout << "eval: overall mean dice " << report.mean_overall << " -> " << args.out << "\n";
    return 0;
}

}  // namespace psegcli
