#include <pybind11/pybind11.h>

#include "stochinv/error.hpp"

namespace py = pybind11;

void bind_measures(py::module& m);
void bind_transport(py::module& m);
void bind_inversion(py::module& m);
void bind_flow(py::module& m);
void bind_experiment(py::module& m);

PYBIND11_MODULE(_core, m) {
  m.doc() = "Stochastic inverse problems: measures, transport, regularized inversion and gradient flows.";

  static py::exception<stochinv::Error> error(m, "StochinvError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const stochinv::Error& e) {
      const py::tuple args = py::make_tuple(std::string(stochinv::to_string(e.code())), std::string(e.what()));
      PyErr_SetObject(error.ptr(), args.ptr());
    }
  });

  bind_measures(m);
  bind_transport(m);
  bind_inversion(m);
  bind_flow(m);
  bind_experiment(m);
}
