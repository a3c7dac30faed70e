import dtcnsim.const
