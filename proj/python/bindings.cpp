#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rlpf/forcefield.hpp"
#include "rlpf/pipeline.hpp"
#include "rlpf/xyz.hpp"

namespace py = pybind11;
using namespace rlpf;

namespace {

const AtomTable& table() { return AtomTable::standard(); }

Molecule molecule_from_symbols(const std::vector<std::string>& symbols, const Coords& coords) {
  std::vector<int> el;
  for (const auto& s : symbols) {
    const int e = table().index_of(s);
    if (e < 0) throw InvalidMolecule("unknown element " + s);
    el.push_back(e);
  }
  return Molecule::from_elements(el, coords, table().num_elements());
}

std::vector<std::string> symbols_of(const Molecule& m) {
  std::vector<std::string> out;
  for (int e : m.elements()) out.push_back(table().symbol(e));
  return out;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["atom_stability"] = r.atom_stability;
  d["molecule_stability"] = r.molecule_stability;
  d["validity"] = r.validity;
  d["uniqueness"] = r.uniqueness;
  d["novelty"] = r.novelty;
  d["n_samples"] = r.n_samples;
  return d;
}

py::dict metrics_dict(const EpochMetrics& m) {
  py::dict d;
  d["epoch"] = m.epoch;
  d["mean_reward"] = m.mean_reward;
  d["molecule_stability"] = m.molecule_stability;
  d["atom_stability"] = m.atom_stability;
  d["validity"] = m.validity;
  d["kl_to_pretrained"] = m.kl_to_pretrained;
  d["clip_fraction"] = m.clip_fraction;
  d["mean_force_rmsd"] = m.mean_force_rmsd;
  d["penalty_fraction"] = m.penalty_fraction;
  d["updates"] = m.updates;
  return d;
}

std::vector<Molecule> sample_molecules(const Checkpoint& c, int n, std::uint64_t seed) {
  const NoiseSchedule s = c.schedule();
  std::vector<Molecule> out;
  for (int k = 0; k < n; ++k) {
    const SeedSpec sd = SeedSpec{seed, 0}.derive(static_cast<std::uint64_t>(k));
    Rng size_rng(sd.derive(1));
    out.push_back(sample_trajectory(c.params, c.sizes.sample(size_rng), s, sd).molecule);
  }
  return out;
}

}  // namespace

PYBIND11_MODULE(_rlpf, m) {
  m.doc() = "Equivariant molecular diffusion with reward fine-tuning";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, (std::string(e.kind()) + ": " + e.what()).c_str());
    }
  });

  py::class_<Molecule>(m, "Molecule")
      .def(py::init(&molecule_from_symbols), py::arg("symbols"), py::arg("coords"))
      .def_readwrite("coords", &Molecule::coords)
      .def_readonly("types", &Molecule::types)
      .def_readonly("mask", &Molecule::mask)
      .def_property_readonly("atom_count", &Molecule::atom_count)
      .def_property_readonly("capacity", &Molecule::capacity)
      .def_property_readonly("symbols", &symbols_of)
      .def("padded", &Molecule::padded, py::arg("capacity"))
      .def("compacted", &Molecule::compacted)
      .def("__repr__", [](const Molecule& mol) {
        std::string s = "Molecule(";
        for (const auto& sym : symbols_of(mol)) s += sym;
        return s + ")";
      });

  m.def("project_zero_com", &project_zero_com, py::arg("coords"), py::arg("mask"));
  m.def("graph_hash", [](const Molecule& mol) { return molecule_graph_hash(mol, table()); });

  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_property_readonly("steps", &NoiseSchedule::steps)
      .def_property_readonly("alphas", &NoiseSchedule::alphas)
      .def_property_readonly("sigmas", &NoiseSchedule::sigmas)
      .def("alpha", &NoiseSchedule::alpha)
      .def("sigma", &NoiseSchedule::sigma)
      .def("snr", &NoiseSchedule::snr);
  m.def(
      "make_schedule",
      [](int steps, const std::string& kind) { return make_schedule(steps, schedule_kind_from_string(kind)); },
      py::arg("steps"), py::arg("kind") = "polynomial");
  m.def(
      "transition",
      [](const NoiseSchedule& s, int t, int r) {
        const Transition tr = transition_params(s, t, r);
        return py::make_tuple(tr.alpha, tr.sigma, tr.sigma_rev);
      },
      py::arg("schedule"), py::arg("t"), py::arg("r"), "(alpha_t|r, sigma_t|r, reverse sigma)");

  m.def(
      "energy_forces",
      [](const Molecule& mol) {
        const ForceResult fr = energy_forces(mol, BondTopology::inferred(mol, table()), table());
        return py::make_tuple(fr.energy, fr.forces);
      },
      py::arg("molecule"), "Surrogate energy (eV) and forces (eV/Å) with distance-inferred bonds");

  py::class_<RewardRecord>(m, "RewardRecord")
      .def_readonly("value", &RewardRecord::value)
      .def_readonly("penalty", &RewardRecord::penalty)
      .def_readonly("raw_rmsd", &RewardRecord::raw_rmsd)
      .def_property_readonly("kind", [](const RewardRecord& r) { return to_string(r.kind); });
  m.def(
      "force_reward", [](const Molecule& mol, const std::string& cmd) { return force_reward(mol, table(), cmd); },
      py::arg("molecule"), py::arg("external_command") = "");
  m.def(
      "valency_reward", [](const Molecule& mol) { return valency_reward(mol, table()); }, py::arg("molecule"));

  m.def(
      "generate_dataset",
      [](int count, int min_atoms, int max_atoms, std::uint64_t seed) {
        py::gil_scoped_release nogil;
        std::vector<Molecule> out;
        for (auto& e : generate_dataset(count, {min_atoms, max_atoms}, table(), SeedSpec{seed, 0}))
          out.push_back(std::move(e.molecule));
        return out;
      },
      py::arg("count"), py::arg("min_atoms") = 3, py::arg("max_atoms") = 7, py::arg("seed") = 0);
  m.def(
      "read_xyz", [](const std::string& text) { return read_xyz(text, table()); }, py::arg("text"));
  m.def(
      "write_xyz", [](const Molecule& mol, const std::string& c) { return write_xyz(mol, table(), c); },
      py::arg("molecule"), py::arg("comment") = "");

  m.def(
      "masked_logp",
      [](const RowMatrix& z, const RowMatrix& mu, double sigma, const Mask& mask) {
        return masked_logp(z, mu, sigma, mask).value;
      },
      py::arg("z"), py::arg("mu"), py::arg("sigma"), py::arg("mask"));
  m.def(
      "ppo_objective",
      [](const std::vector<double>& ratios, const std::vector<double>& adv, double epsilon) {
        const PpoResult r = ppo_objective(ratios, adv, ClipConfig{epsilon});
        py::dict d;
        d["objective"] = r.objective;
        d["grad_ratio"] = r.grad_ratio;
        d["grad_logp"] = r.grad_logp;
        d["clip_fraction"] = r.clip_fraction;
        return d;
      },
      py::arg("ratios"), py::arg("advantages"), py::arg("epsilon") = 0.2);

  py::class_<PolicyParams>(m, "PolicyParams")
      .def_property_readonly("size", &PolicyParams::size)
      .def_property_readonly("digest", &PolicyParams::digest)
      .def_property_readonly("values", [](const PolicyParams& p) {
        const auto v = p.flat_view();
        return std::vector<double>(v.begin(), v.end());
      });
  m.def(
      "init_params",
      [](int layers, int hidden, std::uint64_t seed) { return init_params(layers, hidden, SeedSpec{seed, 0}); },
      py::arg("layers") = 2, py::arg("hidden") = 32, py::arg("seed") = 0);
  m.def(
      "denoise",
      [](const PolicyParams& p, const RowMatrix& z, double t_frac, const Mask& mask) {
        const DenoiserOutput out = forward(p, z, t_frac, mask);
        return py::make_tuple(out.eps_x, out.eps_h);
      },
      py::arg("params"), py::arg("z"), py::arg("t_frac"), py::arg("mask"));

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_readonly("params", &Checkpoint::params)
      .def_readonly("steps", &Checkpoint::steps)
      .def_readonly("epoch", &Checkpoint::epoch)
      .def("schedule", &Checkpoint::schedule)
      .def("save", [](const Checkpoint& c, const std::string& path) { save_checkpoint(path, c); });
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  m.def(
      "sample",
      [](const Checkpoint& c, int n, std::uint64_t seed) {
        py::gil_scoped_release nogil;
        return sample_molecules(c, n, seed);
      },
      py::arg("checkpoint"), py::arg("n"), py::arg("seed") = 0);
  m.def(
      "evaluate", [](const std::vector<Molecule>& mols) { return report_dict(evaluate(mols, table(), {})); },
      py::arg("molecules"));
  m.def(
      "rejection_sample",
      [](const Checkpoint& c, int target, double threshold, int batch, std::uint64_t seed) {
        const RejectionResult r = [&] {
          py::gil_scoped_release nogil;
          return rejection_sample(c.params, c.schedule(), c.sizes, target, threshold, batch, SeedSpec{seed, 0},
                                  table());
        }();
        return py::make_tuple(r.total_sampled, r.stable);
      },
      py::arg("checkpoint"), py::arg("target"), py::arg("threshold") = 0.2, py::arg("batch") = 64,
      py::arg("seed") = 0);

  m.def(
      "pretrain",
      [](const std::vector<Molecule>& data, int layers, int hidden, int steps, int iterations, int batch, double lr,
         int holdout, std::uint64_t seed) {
        PretrainConfig pc;
        pc.layers = layers;
        pc.hidden = hidden;
        pc.steps = steps;
        pc.max_iterations = iterations;
        pc.batch = batch;
        pc.lr = lr;
        pc.holdout = holdout;
        pc.seed = seed;
        py::gil_scoped_release nogil;
        return pretrain(data, pc).checkpoint;
      },
      py::arg("data"), py::arg("layers") = 2, py::arg("hidden") = 32, py::arg("steps") = 100,
      py::arg("iterations") = 5000, py::arg("batch") = 64, py::arg("lr") = 1e-4, py::arg("holdout") = 64,
      py::arg("seed") = 0);
  m.def(
      "finetune",
      [](const Checkpoint& start, const std::string& reward, int epochs, int K, double lr, double epsilon,
         int inner_epochs, int minibatch, int workers, std::uint64_t seed, bool stop_on_convergence) {
        RunConfig cfg;
        cfg.steps = start.steps;
        cfg.reward.kind = reward_kind_from_string(reward);
        cfg.max_epochs = epochs;
        cfg.K = K;
        cfg.adam.lr = lr;
        cfg.clip = ClipConfig{epsilon, inner_epochs, minibatch};
        cfg.reward_workers = workers;
        cfg.seed = seed;
        cfg.stop_on_convergence = stop_on_convergence;
        const FinetuneResult res = [&] {
          py::gil_scoped_release nogil;
          return run_finetune(cfg, start, {});
        }();
        py::list rows;
        for (const auto& mtr : res.metrics) rows.append(metrics_dict(mtr));
        return py::make_tuple(res.final, rows);
      },
      py::arg("start"), py::arg("reward") = "force", py::arg("epochs") = 30, py::arg("K") = 64,
      py::arg("lr") = 1e-5, py::arg("epsilon") = 0.2, py::arg("inner_epochs") = 1, py::arg("minibatch") = 640,
      py::arg("workers") = 1, py::arg("seed") = 0, py::arg("stop_on_convergence") = true);
}
