#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dpcc/codec.hpp"
#include "dpcc/common.hpp"
#include "dpcc/diffnet.hpp"
#include "dpcc/geometry.hpp"
#include "dpcc/metrics.hpp"
#include "dpcc/training.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitWrongModel = 3;
constexpr int kExitCorrupt = 4;

int exit_code_for(const dpcc::Error& e) {
  switch (e.kind()) {
    case dpcc::ErrorKind::wrong_model: return kExitWrongModel;
    case dpcc::ErrorKind::corrupt_stream:
    case dpcc::ErrorKind::parse: return kExitCorrupt;
    case dpcc::ErrorKind::argument:
    case dpcc::ErrorKind::config:
    case dpcc::ErrorKind::degenerate:
    case dpcc::ErrorKind::io: return kExitUsage;
    default: return 1;
  }
}

struct GenShapesArgs {
  std::string out_dir;
  std::vector<std::string> classes = dpcc::shape_kind_names();
  int per_class = 10;
  long points = 2048;
  double jitter = 0.01;
  std::uint64_t seed = 0;
};

int run_gen_shapes(const GenShapesArgs& args) {
  std::vector<dpcc::ShapeKind> kinds;
  for (const auto& name : args.classes) kinds.push_back(dpcc::parse_shape_kind(name));
  fs::create_directories(args.out_dir);
  std::ofstream manifest(fs::path(args.out_dir) / "manifest.csv");
  dpcc::require(manifest.good(), dpcc::ErrorKind::io, "cannot write manifest.csv");
  manifest << "filename,class,points,seed\n";
  for (std::size_t c = 0; c < kinds.size(); ++c) {
    for (int j = 0; j < args.per_class; ++j) {
      const std::uint64_t inst_seed = dpcc::derive_seed(args.seed, c + 1, static_cast<std::uint64_t>(j));
      const dpcc::PointCloud pc = dpcc::gen_shape(kinds[c], args.points, args.jitter, inst_seed);
      char name[64];
      std::snprintf(name, sizeof(name), "%s_%03d.xyz", args.classes[c].c_str(), j);
      dpcc::save_xyz(pc, (fs::path(args.out_dir) / name).string());
      manifest << name << "," << args.classes[c] << "," << args.points << "," << inst_seed << "\n";
    }
  }
  std::cout << "wrote " << kinds.size() * static_cast<std::size_t>(args.per_class) << " clouds to " << args.out_dir
            << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& ckpt_path, std::string log_path, bool resume) {
  const dpcc::TrainConfig cfg = dpcc::load_train_config(config_path);
  if (log_path.empty()) log_path = ckpt_path + ".log.csv";
  const dpcc::TrainResult result = dpcc::train(cfg, ckpt_path, log_path, resume);
  std::cout << "trained to step " << result.model.ps.step << ", checkpoint: " << ckpt_path << "\n";
  if (!result.log.empty()) {
    const auto& last = result.log.back();
    std::cout << "final losses: total=" << last.loss_total << " diff=" << last.loss_diff << " vq=" << last.loss_vq
              << "\n";
  }
  return 0;
}

int run_encode(const std::string& model_path, const std::string& in_path, const std::string& out_path) {
  const dpcc::Model model = dpcc::load_checkpoint(model_path);
  const dpcc::PointCloud pc = dpcc::load_point_cloud(in_path);
  const dpcc::Bitstream stream = dpcc::compress(pc, model);
  dpcc::save_bitstream(stream, out_path);
  std::printf("encoded %u points, C=%u N=%u, bpp=%.9g (wire bpp %.9g)\n", stream.P, stream.C, stream.N,
              dpcc::bpp(stream), dpcc::wire_bpp(stream));
  return 0;
}

int run_decode(const std::string& model_path, const std::string& in_path, const std::string& out_path,
               std::uint64_t seed) {
  const dpcc::Model model = dpcc::load_checkpoint(model_path);
  const dpcc::Bitstream stream = dpcc::load_bitstream(in_path);
  const dpcc::PointCloud pc = dpcc::decompress(stream, model, seed);
  dpcc::save_xyz(pc, out_path);
  std::cout << "decoded " << pc.size() << " points to " << out_path << "\n";
  return 0;
}

std::vector<fs::path> corpus_files(const std::string& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext == ".xyz" || ext == ".ply") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

struct RdRow {
  int C = 0;
  double bpp = 0.0;
  double chamfer = 0.0;
  double emd = 0.0;
  double psnr_db = 0.0;
  long samples = 0;
};

int run_rd_curve(const std::vector<std::string>& model_paths, const std::string& corpus_dir,
                 const std::string& out_csv, std::uint64_t seed, const std::string& per_sample_csv) {
  const auto files = corpus_files(corpus_dir);
  dpcc::require(!files.empty(), dpcc::ErrorKind::argument, "rd-curve: corpus directory has no .xyz/.ply files");

  std::ofstream per_sample;
  if (!per_sample_csv.empty()) {
    per_sample.open(per_sample_csv);
    dpcc::require(per_sample.good(), dpcc::ErrorKind::io, "cannot write " + per_sample_csv);
    per_sample << dpcc::metric_csv_header() << "\n";
  }

  std::cout << "metric conventions: chamfer = sum of directed means of squared NN distances; "
               "emd = mean unsquared assignment distance; psnr peak = longest reference bbox edge\n";

  std::vector<RdRow> rows;
  for (const auto& model_path : model_paths) {
    const dpcc::Model model = dpcc::load_checkpoint(model_path);
    RdRow row;
    row.C = model.cfg.C;
    for (const auto& file : files) {
      const dpcc::PointCloud ref = dpcc::load_point_cloud(file.string());
      const dpcc::Bitstream stream = dpcc::compress(ref, model);
      const dpcc::PointCloud rec = dpcc::decompress(stream, model, seed);
      const dpcc::MetricReport report = dpcc::evaluate(ref, rec, stream);
      row.bpp += report.bpp;
      row.chamfer += report.chamfer;
      row.emd += report.emd;
      row.psnr_db += report.psnr_p2plane;
      row.samples += 1;
      if (per_sample.is_open())
        per_sample << dpcc::metric_csv_row(file.filename().string(), report, ref.size(), model.cfg.C, model.cfg.N)
                   << "\n";
    }
    const double inv = 1.0 / static_cast<double>(row.samples);
    row.bpp *= inv;
    row.chamfer *= inv;
    row.emd *= inv;
    row.psnr_db *= inv;
    rows.push_back(row);
  }
  std::sort(rows.begin(), rows.end(), [](const RdRow& a, const RdRow& b) { return a.bpp < b.bpp; });

  std::ofstream out(out_csv);
  dpcc::require(out.good(), dpcc::ErrorKind::io, "cannot write " + out_csv);
  out << "C,bpp,chamfer,emd,psnr_db,samples\n";
  char buf[256];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%ld", row.C, row.bpp, row.chamfer, row.emd, row.psnr_db,
                  row.samples);
    out << buf << "\n";
    std::cout << buf << "\n";
  }
  return 0;
}

int run_plot_data(const std::string& in_csv, const std::string& metric) {
  std::ifstream in(in_csv);
  dpcc::require(in.good(), dpcc::ErrorKind::io, "cannot open " + in_csv);
  std::string line;
  dpcc::require(static_cast<bool>(std::getline(in, line)), dpcc::ErrorKind::parse, in_csv + ": empty CSV");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) cols.push_back(tok);
  }
  const auto it = std::find(cols.begin(), cols.end(), metric);
  dpcc::require(it != cols.end(), dpcc::ErrorKind::argument, "plot-data: unknown metric column " + metric);
  const auto bpp_it = std::find(cols.begin(), cols.end(), "bpp");
  dpcc::require(bpp_it != cols.end(), dpcc::ErrorKind::parse, in_csv + ": no bpp column");
  const std::size_t mcol = static_cast<std::size_t>(it - cols.begin());
  const std::size_t bcol = static_cast<std::size_t>(bpp_it - cols.begin());
  std::cout << "# bpp " << metric << "\n";
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) fields.push_back(tok);
    dpcc::require(fields.size() >= cols.size(), dpcc::ErrorKind::parse,
                  in_csv + ": short row at line " + std::to_string(line_no));
    std::cout << fields[bcol] << " " << fields[mcol] << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dpcc: learned point-cloud geometry codec (encoder + chunked VQ + diffusion decoder)"};
  app.require_subcommand(1);

  GenShapesArgs gen_args;
  auto* gen = app.add_subcommand("gen-shapes", "Generate a synthetic primitive-shape corpus as .xyz files");
  gen->add_option("--out", gen_args.out_dir, "Output directory")->required();
  gen->add_option("--classes", gen_args.classes, "Comma-separated class list (sphere,torus,box,cylinder,cone)")
      ->delimiter(',');
  gen->add_option("--per-class", gen_args.per_class, "Clouds per class")->check(CLI::PositiveNumber);
  gen->add_option("--points", gen_args.points, "Points per cloud")->check(CLI::PositiveNumber);
  gen->add_option("--jitter", gen_args.jitter, "Gaussian surface jitter sigma");
  gen->add_option("--seed", gen_args.seed, "Base RNG seed");

  std::string cfg_path, ckpt_path, log_path;
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a key=value config file");
  train_cmd->add_option("--config", cfg_path, "Config file (key=value lines; 'preset=desk|paper' first)")
      ->required();
  train_cmd->add_option("--out", ckpt_path, "Output checkpoint path")->required();
  train_cmd->add_option("--log", log_path, "Training log CSV (default <out>.log.csv)");
  train_cmd->add_flag("--resume", resume, "Resume from the output checkpoint if it exists");

  std::string enc_model, enc_in, enc_out;
  auto* enc = app.add_subcommand("encode", "Compress a point cloud (.xyz or .ply) to a bitstream");
  enc->add_option("--model", enc_model, "Model checkpoint")->required();
  enc->add_option("--in", enc_in, "Input cloud")->required();
  enc->add_option("--out", enc_out, "Output bitstream")->required();

  std::string dec_model, dec_in, dec_out;
  std::uint64_t dec_seed = 0;
  auto* dec = app.add_subcommand("decode", "Reconstruct a point cloud from a bitstream");
  dec->add_option("--model", dec_model, "Model checkpoint")->required();
  dec->add_option("--in", dec_in, "Input bitstream")->required();
  dec->add_option("--out", dec_out, "Output .xyz cloud")->required();
  dec->add_option("--seed", dec_seed, "Decoder noise seed (default 0)");

  std::vector<std::string> rd_models;
  std::string rd_corpus, rd_out, rd_per_sample;
  std::uint64_t rd_seed = 0;
  auto* rd = app.add_subcommand("rd-curve",
                                "Rate-distortion sweep: one CSV row per model (C,bpp,chamfer,emd,psnr_db,samples), "
                                "sorted by bpp ascending");
  rd->add_option("--models", rd_models, "Comma-separated checkpoint list")->required()->delimiter(',');
  rd->add_option("--corpus", rd_corpus, "Directory of .xyz/.ply clouds")->required();
  rd->add_option("--out", rd_out, "Output CSV")->required();
  rd->add_option("--seed", rd_seed, "Decoder noise seed");
  rd->add_option("--per-sample", rd_per_sample,
                 "Also write per-sample rows (sample_id,P,C,N,bpp,chamfer,emd,psnr_db,flags)");

  std::string plot_in, plot_metric = "chamfer";
  auto* plot = app.add_subcommand("plot-data", "Emit gnuplot-ready 'bpp metric' columns from an rd-curve CSV");
  plot->add_option("--in", plot_in, "rd-curve CSV")->required();
  plot->add_option("--metric", plot_metric, "Column to plot (chamfer|emd|psnr_db)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen->parsed()) return run_gen_shapes(gen_args);
    if (train_cmd->parsed()) return run_train(cfg_path, ckpt_path, log_path, resume);
    if (enc->parsed()) return run_encode(enc_model, enc_in, enc_out);
    if (dec->parsed()) return run_decode(dec_model, dec_in, dec_out, dec_seed);
    if (rd->parsed()) return run_rd_curve(rd_models, rd_corpus, rd_out, rd_seed, rd_per_sample);
    if (plot->parsed()) return run_plot_data(plot_in, plot_metric);
  } catch (const dpcc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
