"""
Component registry for stage primitives and detection heads.
"""

from __future__ import annotations

from typing import Callable


class ComponentRegistry:
    """Registry mapping a component kind to the callable that builds it.

    The model builder never imports stage or head classes directly; it asks
    the registry for the builder registered under ``spec.kind`` (or the
    architecture's head kind), so new primitives plug in without touching
    the builder.

    Example:
        >>> registry = ComponentRegistry("stage")
        >>> registry.register("residual", ResidualStage, "Additive residual stage")
        >>> registry.get("residual")
    """

    def __init__(self, component: str):
        self.component = component
        self._builders: dict[str, Callable] = {}
        self._docs: dict[str, str] = {}

    def register(self, kind: str, builder: Callable, doc: str = "") -> "ComponentRegistry":
        """Register a builder under the given kind.

        Args:
            kind: Component kind (e.g. 'residual', 'dense')
            builder: Callable constructing the component
            doc: Optional documentation string

        Returns:
            self for method chaining
        """
        self._builders[str(kind)] = builder
        if doc:
            self._docs[str(kind)] = doc
        return self

    def unregister(self, kind: str) -> "ComponentRegistry":
        """Remove a builder from the registry.

        Returns:
            self for method chaining
        """
        self._builders.pop(str(kind), None)
        self._docs.pop(str(kind), None)
        return self

    def has(self, kind: str) -> bool:
        """Check if a builder is registered for ``kind``."""
        return str(kind) in self._builders

    def get(self, kind: str) -> Callable:
        """Get the builder for a kind.

        Raises:
            KeyError: If no builder is registered for ``kind``
        """
        if not self.has(kind):
            raise KeyError(
                f"No {self.component} registered for kind '{kind}' "
                f"(known: {', '.join(self.list_kinds()) or 'none'})"
            )
        return self._builders[str(kind)]

    def list_kinds(self) -> list[str]:
        """List all registered kinds."""
        return list(self._builders)

    def get_doc(self, kind: str) -> str:
        """Get documentation for a kind."""
        return self._docs.get(str(kind), "")
