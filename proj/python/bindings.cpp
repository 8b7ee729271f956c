#include <pybind11/pybind11.h>

PYBIND11_MODULE(_nslnet, m) {
    m.doc() = "nslnet core bindings";
}
