// SPDX-License-Identifier: Apache-2.0
// Python bindings: numpy in, numpy out. Errors surface as palu.PaluError.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "palu/accounting.hpp"
#include "palu/attention.hpp"
#include "palu/container.hpp"
#include "palu/decomposition.hpp"
#include "palu/error.hpp"
#include "palu/linalg.hpp"
#include "palu/pipeline.hpp"
#include "palu/quantizer.hpp"
#include "palu/rank_allocator.hpp"

namespace py = pybind11;
using namespace palu;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Codes = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
  const auto rows = static_cast<std::size_t>(a.shape(0));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  return Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::array_t<double> to_numpy(const Matrix& m) {
  py::array_t<double> out({m.rows(), m.cols()});
  std::copy(m.data().begin(), m.data().end(), out.mutable_data());
  return out;
}

py::array_t<double> rows_to_numpy(const std::vector<std::vector<double>>& rows) {
  const std::size_t cols = rows.empty() ? 0 : rows[0].size();
  py::array_t<double> out({rows.size(), cols});
  double* p = out.mutable_data();
  for (const auto& r : rows) p = std::copy(r.begin(), r.end(), p);
  return out;
}

py::dict json_to_dict(const nlohmann::json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json dict_to_json(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

AttentionConfig make_config(std::size_t d_model, std::size_t n_heads, std::size_t head_dim, std::size_t layers,
                            bool rope, double rope_base) {
  AttentionConfig c{d_model, n_heads, head_dim, {rope, rope_base}, layers};
  c.validate();
  return c;
}

ModelWeights weights_from(const py::list& layers) {
  ModelWeights w;
  for (const auto& item : layers) {
    const auto d = item.cast<py::dict>();
    w.layers.push_back({to_matrix(d["wq"].cast<Array>()), to_matrix(d["wk"].cast<Array>()),
                        to_matrix(d["wv"].cast<Array>()), to_matrix(d["wo"].cast<Array>())});
  }
  return w;
}

py::list weights_to(const ModelWeights& w) {
  py::list out;
  for (const auto& l : w.layers) {
    py::dict d;
    d["wq"] = to_numpy(l.wq);
    d["wk"] = to_numpy(l.wk);
    d["wv"] = to_numpy(l.wv);
    d["wo"] = to_numpy(l.wo);
    out.append(d);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_palu, m) {
  m.doc() = "Low-rank KV-cache compression core";

  py::register_exception<Error>(m, "PaluError", PyExc_ValueError);

  // tensor core
  m.def("svd", [](const Array& a) {
    const auto r = svd(to_matrix(a));
    return py::make_tuple(to_numpy(r.u), py::array_t<double>(r.singular_values.size(), r.singular_values.data()),
                          to_numpy(r.vt));
  }, py::arg("a"));
  m.def("hadamard", [](int dim) { return to_numpy(hadamard(dim)); }, py::arg("dim"));
  m.def("random_matrix", [](std::size_t rows, std::size_t cols, std::uint64_t seed, std::optional<double> decay) {
    return to_numpy(random_matrix(rows, cols, seed, decay));
  }, py::arg("rows"), py::arg("cols"), py::arg("seed"), py::arg("decay") = py::none());

  // decomposition
  py::class_<DecomposedLayer>(m, "DecomposedLayer")
      .def_property_readonly("ranks", &DecomposedLayer::ranks)
      .def_property_readonly("total_rank", &DecomposedLayer::total_rank)
      .def_property_readonly("group_size", [](const DecomposedLayer& l) { return l.granularity.group_size(); })
      .def_property_readonly("factors", [](const DecomposedLayer& l) {
        py::list out;
        for (const auto& g : l.groups) out.append(py::make_tuple(to_numpy(g.a), to_numpy(g.b)));
        return out;
      })
      .def("reconstruct", [](const DecomposedLayer& l) { return to_numpy(reconstruct(l)); })
      .def("frobenius_error", [](const DecomposedLayer& l, const Array& w) { return frobenius_error(l, to_matrix(w)); });

  m.def("decompose", [](const Array& w, std::size_t head_dim, std::size_t n_heads, std::size_t group_size,
                        std::vector<std::size_t> ranks, std::optional<Array> calibration) {
    const auto g = Granularity::from_group_size(group_size, n_heads);
    if (!calibration) return decompose(to_matrix(w), head_dim, n_heads, g, ranks);
    const CalibrationSet calib{to_matrix(*calibration), "python"};
    return decompose(to_matrix(w), head_dim, n_heads, g, ranks, DecompositionMode::whitened, &calib);
  }, py::arg("w"), py::arg("head_dim"), py::arg("n_heads"), py::arg("group_size"), py::arg("ranks"),
     py::arg("calibration") = py::none());

  // quantizer
  py::class_<QuantizedLatent>(m, "QuantizedLatent")
      .def_readonly("bits", &QuantizedLatent::bits)
      .def_property_readonly("codes", [](const QuantizedLatent& q) {
        py::array_t<std::uint8_t> out({q.rows, q.cols});
        std::copy(q.codes.begin(), q.codes.end(), out.mutable_data());
        return out;
      })
      .def_readonly("scales", &QuantizedLatent::scales)
      .def_readonly("zero_points", &QuantizedLatent::zero_points)
      .def("dequantize", [](const QuantizedLatent& q) { return to_numpy(dequantize(q)); });
  m.def("quantize", [](const Array& latent, int bits) { return quantize(to_matrix(latent), bits); },
        py::arg("latent"), py::arg("bits"));
  m.def("pack_codes", [](const Codes& codes, int bits) {
    const auto packed = pack_codes(std::span<const std::uint8_t>(codes.data(), static_cast<std::size_t>(codes.size())), bits);
    return py::bytes(reinterpret_cast<const char*>(packed.data()), packed.size());
  }, py::arg("codes"), py::arg("bits"));
  m.def("unpack_codes", [](const py::bytes& packed, std::size_t count, int bits) {
    const std::string s = packed;
    const auto codes = unpack_codes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()),
                                    count, bits);
    return py::array_t<std::uint8_t>(codes.size(), codes.data());
  }, py::arg("packed"), py::arg("count"), py::arg("bits"));
  m.def("fuse_hadamard", [](const DecomposedLayer& l) { return fuse_hadamard(l).layer; }, py::arg("layer"));
  m.def("outlier_metric", [](const Array& latent) { return outlier_metric(to_matrix(latent)); }, py::arg("latent"));

  // rank allocation: scores is {target_id: score}, widths {target_id: width}
  m.def("allocate", [](const std::map<std::string, double>& scores, const std::map<std::string, std::size_t>& widths,
                       std::size_t d_model, double budget_rate, std::size_t min_rank, const std::string& rounding) {
    std::vector<FisherScore> s;
    std::vector<std::size_t> w;
    for (const auto& [id, score] : scores) {
      const auto it = widths.find(id);
      if (it == widths.end()) throw py::key_error("no width for " + id);
      s.push_back({id, score});
      w.push_back(it->second);
    }
    const auto plan = allocate(s, w, d_model, budget_rate, min_rank, RankRounding::parse(rounding));
    std::map<std::string, std::size_t> out;
    for (const auto& e : plan.entries) out[e.target_id] = e.allocated_rank;
    return out;
  }, py::arg("scores"), py::arg("widths"), py::arg("d_model"), py::arg("budget_rate"), py::arg("min_rank") = 1,
     py::arg("rounding") = "none");

  // attention
  m.def("random_model", [](std::size_t d_model, std::size_t n_heads, std::size_t head_dim, std::size_t layers,
                           std::uint64_t seed, double spectrum) {
    return weights_to(random_model(make_config(d_model, n_heads, head_dim, layers, false, 10000.0), seed, spectrum));
  }, py::arg("d_model"), py::arg("n_heads"), py::arg("head_dim"), py::arg("layers"), py::arg("seed"),
     py::arg("spectrum") = 0.5);

  m.def("reference_decode", [](const py::list& weights, const Array& tokens, std::size_t n_heads, bool rope,
                               double rope_base) {
    const ModelWeights w = weights_from(weights);
    const Matrix x = to_matrix(tokens);
    const auto c = make_config(x.cols(), n_heads, x.cols() / n_heads, w.layers.size(), rope, rope_base);
    return rows_to_numpy(reference_decode(w, c, x).outputs);
  }, py::arg("weights"), py::arg("tokens"), py::arg("n_heads"), py::arg("rope") = false,
     py::arg("rope_base") = 10000.0);

  // Decomposes every layer at an equal per-group rank and decodes the tokens
  // through the latent path.
  m.def("palu_decode", [](const py::list& weights, const Array& tokens, std::size_t n_heads, std::size_t group_size,
                          std::size_t rank, int bits, bool hadamard_rotation, bool rope, double rope_base,
                          std::size_t tile_len) {
    ModelWeights w = weights_from(weights);
    const Matrix x = to_matrix(tokens);
    const auto c = make_config(x.cols(), n_heads, x.cols() / n_heads, w.layers.size(), rope, rope_base);
    const auto g = Granularity::from_group_size(group_size, n_heads);
    const auto ranks = equal_ranks(g.group_count(n_heads), rank);
    std::vector<PaluLayer> layers;
    for (const auto& lw : w.layers) {
      PaluLayer pl{decompose(lw.wk, c.head_dim, n_heads, g, ranks), decompose(lw.wv, c.head_dim, n_heads, g, ranks)};
      if (hadamard_rotation) pl = {fuse_hadamard(pl.key).layer, fuse_hadamard(pl.value).layer};
      layers.push_back(std::move(pl));
    }
    const PaluModel model = PaluModel::build(std::move(w), std::move(layers), c);
    LatentKVCache cache = make_latent_cache(model, bits);
    std::vector<std::vector<double>> out;
    for (std::size_t t = 0; t < x.rows(); ++t) out.push_back(palu_decode_step(model, cache, x.row(t), tile_len));
    return rows_to_numpy(out);
  }, py::arg("weights"), py::arg("tokens"), py::arg("n_heads"), py::arg("group_size"), py::arg("rank"),
     py::arg("bits") = 16, py::arg("hadamard") = false, py::arg("rope") = false, py::arg("rope_base") = 10000.0,
     py::arg("tile_len") = 0);

  // accounting
  m.def("kv_cache_bytes", [](const std::string& preset, std::uint64_t tokens, double budget_rate, int bits,
                             std::size_t group_size) {
    const auto p = ModelPreset::by_name(preset);
    const auto plan = uniform_plan(p, group_size, budget_rate);
    const auto kv = kv_cache_bytes(p, tokens, &plan, bits);
    py::dict d;
    d["baseline"] = kv.baseline;
    d["compressed"] = kv.compressed;
    d["metadata"] = kv.metadata;
    d["compression_rate"] = kv.compression_rate;
    d["compression_rate_with_metadata"] = kv.compression_rate_with_metadata;
    return d;
  }, py::arg("preset"), py::arg("tokens"), py::arg("budget_rate"), py::arg("bits") = 16, py::arg("group_size") = 4);
  m.def("weight_ratio", &weight_ratio, py::arg("m"), py::arg("n"), py::arg("r"));
  m.def("table2", [] {
    py::list out;
    for (const auto& r : compute_table2()) {
      py::dict d;
      d["method"] = r.method;
      d["bits"] = r.bits;
      d["size_gb"] = r.size_gb;
      d["rate_percent"] = r.rate_percent ? py::cast(*r.rate_percent) : py::none();
      out.append(d);
    }
    return out;
  });
  m.def("format_table2", [] { return format_table2(compute_table2()); });

  // container: {name: float64 2-D array or (codes uint8 array, bits)}
  m.def("save_container", [](const std::string& path, const py::dict& tensors, const py::object& meta) {
    TensorContainer c;
    for (const auto& [key, value] : tensors) {
      const auto name = key.cast<std::string>();
      if (py::isinstance<py::tuple>(value)) {
        const auto t = value.cast<py::tuple>();
        const auto codes = t[0].cast<Codes>();
        std::vector<std::size_t> shape(codes.shape(), codes.shape() + codes.ndim());
        c.add(name, PackedTensor{shape, t[1].cast<int>(),
                                 std::vector<std::uint8_t>(codes.data(), codes.data() + codes.size())});
      } else {
        c.add(name, to_matrix(value.cast<Array>()));
      }
    }
    if (!meta.is_none()) c.meta() = dict_to_json(meta);
    c.write(path);
  }, py::arg("path"), py::arg("tensors"), py::arg("meta") = py::none());
  m.def("load_container", [](const std::string& path) {
    const auto c = TensorContainer::read(path);
    py::dict tensors;
    for (const auto& t : c.tensors()) {
      if (const auto* mat = std::get_if<Matrix>(&t.value)) {
        tensors[py::str(t.name)] = to_numpy(*mat);
      } else {
        const auto& p = std::get<PackedTensor>(t.value);
        py::array_t<std::uint8_t> codes(p.shape);
        std::copy(p.codes.begin(), p.codes.end(), codes.mutable_data());
        tensors[py::str(t.name)] = py::make_tuple(codes, p.bits);
      }
    }
    return py::make_tuple(tensors, json_to_dict(c.meta()));
  }, py::arg("path"));

  // end-to-end run from a config dict
  m.def("run_pipeline", [](const py::dict& config) {
    const auto r = run_pipeline(PipelineConfig::from_json(dict_to_json(config)));
    py::dict d;
    d["max_error"] = r.run.max_error;
    d["mean_error"] = r.run.mean_error;
    d["step_errors"] = r.run.step_errors;
    d["plan"] = json_to_dict(plan_to_json(r.plan));
    d["cost"] = json_to_dict(to_json(r.cost));
    std::vector<std::string> files;
    for (const auto& f : r.files) files.push_back(f.string());
    d["files"] = files;
    return d;
  }, py::arg("config"));
}
