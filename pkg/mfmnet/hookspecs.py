from pluggy import HookimplMarker
from pluggy import HookspecMarker

hookspec = HookspecMarker("mfmnet")
hookimpl = HookimplMarker("mfmnet")


@hookspec
def register_commands(cli):
    """Register additional CLI commands, e.g. 'mfmnet mycommand ...'"""


@hookspec
def register_network_configs(register):
    "Register network configs that can be built and trained by name"
