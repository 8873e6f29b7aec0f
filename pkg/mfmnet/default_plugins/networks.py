from mfmnet import hookimpl
from mfmnet.network import full_config, tiny_config, toy_config


@hookimpl
def register_network_configs(register):
    register(full_config(), aliases=("mfm-full", "face144"))
    register(full_config(activation="relu"), aliases=("full-relu",), name="full_relu")
    register(toy_config(), aliases=("toy32",))
    register(toy_config(activation="relu"), name="toy_relu")
    register(tiny_config(), aliases=("gradcheck",))
