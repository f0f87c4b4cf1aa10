# lidnet.models
