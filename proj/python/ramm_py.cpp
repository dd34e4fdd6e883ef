#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ramm/bytes.hpp"
#include "ramm/corpus.hpp"
#include "ramm/harness.hpp"
#include "ramm/objectives.hpp"
#include "ramm/retrieval.hpp"
#include "ramm/store.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace ramm;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::array_t<float> matrix(const std::vector<float>& data, std::size_t rows, std::size_t cols) {
  py::array_t<float> out({static_cast<py::ssize_t>(rows), static_cast<py::ssize_t>(cols)});
  std::copy(data.begin(), data.end(), out.mutable_data());
  return out;
}

std::vector<float> as_vector(const Array<float>& a) { return std::vector<float>(a.data(), a.data() + a.size()); }

py::dict candidate_dict(const Candidate& c, const EmbeddingIndex* index) {
  py::dict d;
  d["pair_id"] = c.pair_id;
  d["row"] = c.row;
  d["s"] = c.s;
  d["s_w"] = c.s_w ? py::cast(*c.s_w) : py::none();
  d["s_v"] = c.s_v ? py::cast(*c.s_v) : py::none();
  if (index) {
    d["caption"] = index->caption(c.row);
    d["source"] = std::string(source_name(index->source(c.row)));
  }
  return d;
}

std::vector<Candidate> pool_from_scores(const std::vector<double>& scores) {
  std::vector<Candidate> pool;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    Candidate c;
    c.pair_id = i;
    c.row = i;
    c.s_v = scores[i];
    c.s = scores[i];
    pool.push_back(c);
  }
  return pool;
}

std::vector<std::size_t> rows_of(const RetrievalResult& r) {
  std::vector<std::size_t> out;
  for (const auto& c : r.selected) out.push_back(c.row);
  return out;
}

}  // namespace

PYBIND11_MODULE(_ramm, m) {
  m.doc() = "retrieval-augmented medical VQA core";

  static py::exception<FormatError> format_error(m, "FormatError", PyExc_ValueError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const FormatError& e) {
      py::object inst = py::reinterpret_borrow<py::object>(format_error.ptr())(e.what());
      inst.attr("code") = static_cast<int>(e.code());
      PyErr_SetObject(format_error.ptr(), inst.ptr());
    }
  });
  py::register_exception<harness::ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<harness::InvalidR>(m, "InvalidR", PyExc_ValueError);

  m.attr("SWEEP_R") = std::vector<std::size_t>(std::begin(harness::kSweepR), std::end(harness::kSweepR));

  m.def(
      "load_tensor",
      [](const fs::path& path) -> py::object {
        const auto bytes = read_file(path);
        if (bytes.size() > 8 && bytes[8] == 8) return to_array(load_tensor<double>(path));
        return to_array(load_tensor<float>(path));
      },
      py::arg("path"), "Read a RAMMTEN1 file; float64 files come back as float64.");
  m.def(
      "save_tensor",
      [](const fs::path& path, py::array a) {
        if (a.dtype().is(py::dtype::of<double>()))
          save_tensor(to_tensor<double>(a.cast<Array<double>>()), path);
        else
          save_tensor(to_tensor<float>(a.cast<Array<float>>()), path);
      },
      py::arg("path"), py::arg("array"));

  py::class_<EmbeddingIndex>(m, "Index")
      .def_property_readonly("size", &EmbeddingIndex::size)
      .def_property_readonly("d_proj", &EmbeddingIndex::d_proj)
      .def_property_readonly("fingerprint", &EmbeddingIndex::fingerprint)
      .def_property_readonly("checksum", &EmbeddingIndex::checksum)
      .def("__len__", &EmbeddingIndex::size)
      .def("pair_id", &EmbeddingIndex::pair_id)
      .def("caption", &EmbeddingIndex::caption)
      .def("source", [](const EmbeddingIndex& x, std::size_t row) { return std::string(source_name(x.source(row))); })
      .def("find", &EmbeddingIndex::find)
      .def("text_vectors", [](const EmbeddingIndex& x) { return matrix(x.text_matrix(), x.size(), x.d_proj()); })
      .def("image_vectors", [](const EmbeddingIndex& x) { return matrix(x.image_matrix(), x.size(), x.d_proj()); })
      .def("save", [](const EmbeddingIndex& x, const fs::path& path) { save_index(x, path); })
      .def("__eq__", [](const EmbeddingIndex& a, const EmbeddingIndex& b) { return a == b; });

  m.def(
      "load_index",
      [](const fs::path& path, std::optional<std::uint64_t> fingerprint) { return load_index(path, fingerprint); },
      py::arg("path"), py::arg("expected_fingerprint") = py::none());
  m.def(
      "make_index",
      [](std::uint64_t fingerprint, const std::vector<std::uint64_t>& ids, const Array<float>& text,
         const Array<float>& image, const std::vector<std::string>& captions) {
        if (text.ndim() != 2 || image.ndim() != 2 || text.shape(0) != image.shape(0) ||
            text.shape(1) != image.shape(1) || static_cast<std::size_t>(text.shape(0)) != ids.size() ||
            captions.size() != ids.size())
          throw std::invalid_argument("make_index: ids, captions and [n x d] text/image arrays must agree");
        const auto d = static_cast<std::size_t>(text.shape(1));
        EmbeddingIndex x(fingerprint, d);
        for (std::size_t i = 0; i < ids.size(); ++i)
          x.append(ids[i], SourceTag::kOther, std::span<const float>(text.data() + i * d, d),
                   std::span<const float>(image.data() + i * d, d), captions[i]);
        return x;
      },
      py::arg("fingerprint"), py::arg("ids"), py::arg("text"), py::arg("image"), py::arg("captions"),
      "Build an index from unit-norm [n x d] text and image vectors.");

  m.def(
      "retrieve",
      [](const EmbeddingIndex& index, const Array<float>& query, std::size_t r, const std::string& mode,
         std::uint64_t seed, std::optional<std::uint64_t> exclude) {
        RetrieveOptions opts;
        opts.r = r;
        if (mode == "train")
          opts.mode = SelectMode::kTrain;
        else if (mode != "infer")
          throw std::invalid_argument("mode must be 'train' or 'infer'");
        opts.seed = seed;
        opts.exclude = exclude;
        const auto q = as_vector(query);
        const auto res = retrieve_by_vector(q, index, opts);
        py::list selected;
        for (const auto& c : res.selected) selected.append(candidate_dict(c, &index));
        py::dict out;
        out["selected"] = selected;
        out["pool_size"] = res.pool_size;
        out["short_pool"] = res.short_pool;
        return out;
      },
      py::arg("index"), py::arg("query"), py::arg("r") = 4, py::arg("mode") = "infer", py::arg("seed") = 0,
      py::arg("exclude") = py::none());

  m.def(
      "select_training",
      [](const std::vector<double>& scores, std::size_t r, std::uint64_t seed) {
        return rows_of(select_training(pool_from_scores(scores), r, seed));
      },
      py::arg("scores"), py::arg("r"), py::arg("seed"), "Sampled positions into `scores`.");
  m.def(
      "select_inference",
      [](const std::vector<double>& scores, std::size_t r) {
        return rows_of(select_inference(pool_from_scores(scores), r));
      },
      py::arg("scores"), py::arg("r"), "Top-r positions into `scores`.");

  m.def(
      "itc_loss",
      [](const Array<double>& text, const Array<double>& image, double tau) {
        return itc_loss(to_tensor(text), to_tensor(image), tau).loss;
      },
      py::arg("text"), py::arg("image"), py::arg("tau") = 0.07);

  m.def("contains_answer", &harness::contains_answer, py::arg("caption"), py::arg("answer"));
  m.def("valid_r", &harness::valid_r, py::arg("r"));

  m.def(
      "gen_synthetic",
      [](const fs::path& out, const std::map<std::string, std::string>& overrides) {
        harness::Settings s;
        for (const auto& [k, v] : overrides) s.set(k, v);
        const auto summary = harness::gen_synthetic(harness::SyntheticSpec::from_settings(s, harness::SyntheticSpec{}), out);
        py::dict d;
        d["pairs"] = summary.pairs;
        d["train_items"] = summary.train_items;
        d["test_items"] = summary.test_items;
        d["retrieval_required"] = summary.retrieval_required;
        return d;
      },
      py::arg("out"), py::arg("overrides") = std::map<std::string, std::string>{},
      "Write a synthetic corpus and VQA splits; `overrides` maps spec keys to values.");

  m.def(
      "harvest",
      [](const fs::path& in, const fs::path& out) {
        const auto res = harvest_dir(in, SectionMatcher(), NoteFilter{});
        emit_corpus(res, in, out);
        py::dict d;
        d["documents"] = res.report.documents;
        d["malformed"] = res.report.malformed;
        d["notes_kept"] = res.report.notes_kept;
        d["pairs"] = res.pairs.size();
        return d;
      },
      py::arg("in_dir"), py::arg("out_dir"));
}
