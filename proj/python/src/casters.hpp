#pragma once

#include <optional>
#include <variant>

#include <pybind11/pybind11.h>

#include "stochinv/maps.hpp"
#include "stochinv/measures.hpp"

namespace pybind11::detail {

template <typename Variant, typename... Alternatives>
struct optional_variant_caster {
  std::optional<Variant> value;

  bool load(handle src, bool convert) {
    if (src.is_none()) return false;
    return (try_load<Alternatives>(src, convert) || ...);
  }

  template <typename V>
  static handle cast(V&& src, return_value_policy, handle parent) {
    return std::visit(
        [&](auto&& alt) {
          using T = std::decay_t<decltype(alt)>;
          return make_caster<T>::cast(std::forward<decltype(alt)>(alt), return_value_policy::move, parent);
        },
        std::forward<V>(src));
  }

  operator Variant*() { return &*value; }
  operator Variant&() { return *value; }
  operator Variant&&() && { return std::move(*value); }
  template <typename T>
  using cast_op_type = movable_cast_op_type<T>;

 private:
  template <typename T>
  bool try_load(handle src, bool convert) {
    make_caster<T> caster;
    if (!caster.load(src, convert)) return false;
    value.emplace(cast_op<T&>(caster));
    return true;
  }
};

template <>
struct type_caster<stochinv::Measure>
    : optional_variant_caster<stochinv::Measure, stochinv::ParticleMeasure, stochinv::GridMeasure,
                              stochinv::GaussianMeasure> {
  static constexpr auto name = const_name("ParticleMeasure | GridMeasure | GaussianMeasure");
};

template <>
struct type_caster<stochinv::ForwardMap>
    : optional_variant_caster<stochinv::ForwardMap, stochinv::LinearForwardMap, stochinv::SmoothForwardMap> {
  static constexpr auto name = const_name("LinearForwardMap | SmoothForwardMap");
};

}  // namespace pybind11::detail
