# Pipeline services, the autodiff engine, the network and file tools
